//! Videos and masks on disk, class vocabularies, and assembly of training/inference clips.
//!
//! Dataset layout under a root directory:
//!
//! ```text
//! vocab.txt                  one class name per line; line index = class index
//! splits.txt                 line 1: comma-separated seen indices, line 2: unseen indices
//! manifest.json              frame size, per-channel mean/std, list of videos
//! <video>/frames/%06d.png    RGB frames
//! <video>/masks/%06d.png     8-bit label maps (255 = ignore); absent for unannotated frames
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::tensor::{Mat, Real};

pub const DEFAULT_IGNORE: u8 = 255;

/// Ordered class names with a seen/unseen partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    names: Vec<String>,
    seen: Vec<usize>,
    unseen: Vec<usize>,
    ignore_index: u8,
}

impl ClassVocabulary {
    pub fn new(names: Vec<String>, seen: Vec<usize>, unseen: Vec<usize>, ignore_index: u8) -> Result<Self> {
        let n = names.len();
        if n == 0 {
            return Err(Error::InvalidVocabulary("no class names".into()));
        }
        if names.iter().any(|s| s.trim().is_empty()) {
            return Err(Error::InvalidVocabulary("empty class name".into()));
        }
        let unique: BTreeSet<&str> = names.iter().map(String::as_str).collect();
        if unique.len() != n {
            return Err(Error::InvalidVocabulary("duplicate class names".into()));
        }
        if (ignore_index as usize) < n {
            return Err(Error::InvalidVocabulary(format!("ignore index {ignore_index} collides with a class")));
        }
        let s: BTreeSet<usize> = seen.iter().copied().collect();
        let u: BTreeSet<usize> = unseen.iter().copied().collect();
        if s.len() != seen.len() || u.len() != unseen.len() {
            return Err(Error::InvalidVocabulary("repeated index in split".into()));
        }
        if s.intersection(&u).next().is_some() {
            return Err(Error::InvalidVocabulary("seen and unseen overlap".into()));
        }
        let all: BTreeSet<usize> = s.union(&u).copied().collect();
        if all != (0..n).collect() {
            return Err(Error::InvalidVocabulary(format!("seen and unseen must cover 0..{n} exactly")));
        }
        Ok(ClassVocabulary { names, seen: s.into_iter().collect(), unseen: u.into_iter().collect(), ignore_index })
    }

    /// Every class seen.
    pub fn all_seen(names: Vec<String>) -> Result<Self> {
        let n = names.len();
        Self::new(names, (0..n).collect(), Vec::new(), DEFAULT_IGNORE)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn seen(&self) -> &[usize] {
        &self.seen
    }

    pub fn unseen(&self) -> &[usize] {
        &self.unseen
    }

    pub fn ignore_index(&self) -> u8 {
        self.ignore_index
    }

    pub fn is_unseen(&self, class: usize) -> bool {
        self.unseen.binary_search(&class).is_ok()
    }

    pub fn seen_names(&self) -> Vec<String> {
        self.seen.iter().map(|&i| self.names[i].clone()).collect()
    }

    /// Position of `class` within the seen list.
    pub fn seen_position(&self, class: usize) -> Option<usize> {
        self.seen.binary_search(&class).ok()
    }

    pub fn read(root: &Path) -> Result<Self> {
        let vocab_path = root.join("vocab.txt");
        let text = fs::read_to_string(&vocab_path).map_err(io_err(&vocab_path))?;
        let names: Vec<String> = text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
        let splits_path = root.join("splits.txt");
        let splits = fs::read_to_string(&splits_path).map_err(io_err(&splits_path))?;
        let mut lines = splits.lines();
        let parse = |line: Option<&str>| -> Result<Vec<usize>> {
            line.unwrap_or("")
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<usize>().map_err(|_| Error::InvalidVocabulary(format!("bad index {s:?} in splits.txt"))))
                .collect()
        };
        let seen = parse(lines.next())?;
        let unseen = parse(lines.next())?;
        Self::new(names, seen, unseen, DEFAULT_IGNORE)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let vocab_path = root.join("vocab.txt");
        let mut text = self.names.join("\n");
        text.push('\n');
        fs::write(&vocab_path, text).map_err(io_err(&vocab_path))?;
        let join = |v: &[usize]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
        let splits_path = root.join("splits.txt");
        fs::write(&splits_path, format!("{}\n{}\n", join(&self.seen), join(&self.unseen))).map_err(io_err(&splits_path))
    }
}

/// Indices `[t - n*s, ..., t - s, t]` of a clip ending at `target`.
pub fn build_clip_indices(target: usize, n: usize, spacing: usize, video_len: usize) -> Result<Vec<usize>> {
    if target >= video_len {
        return Err(Error::FrameOutOfRange { target, video_len });
    }
    let needed = n * spacing;
    if target < needed {
        return Err(Error::InsufficientHistory { target, needed });
    }
    Ok((0..=n).rev().map(|i| target - i * spacing).collect())
}

/// Like [`build_clip_indices`], but near the start of a video the earliest available
/// clip frame is repeated to keep the clip length fixed.
pub fn clip_indices_clamped(target: usize, n: usize, spacing: usize, video_len: usize) -> Result<Vec<usize>> {
    match build_clip_indices(target, n, spacing, video_len) {
        Err(Error::InsufficientHistory { .. }) => {
            let earliest = target % spacing.max(1);
            Ok((0..=n)
                .rev()
                .map(|i| target.checked_sub(i * spacing).unwrap_or(earliest))
                .collect())
        }
        other => other,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameMode {
    /// Uniform over frames outside the clip.
    Train,
    /// The frame farthest from the target; ties go to the lower index.
    Infer,
}

pub fn select_random_frame(target: usize, clip: &[usize], video_len: usize, mode: FrameMode, seed: u64) -> Result<usize> {
    match mode {
        FrameMode::Infer => {
            if video_len == 0 {
                return Err(Error::NoRandomCandidate { video_len });
            }
            let mut best = 0usize;
            for i in 0..video_len {
                if i.abs_diff(target) > best.abs_diff(target) {
                    best = i;
                }
            }
            Ok(best)
        }
        FrameMode::Train => {
            let candidates: Vec<usize> = (0..video_len).filter(|i| !clip.contains(i)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            candidates.choose(&mut rng).copied().ok_or(Error::NoRandomCandidate { video_len })
        }
    }
}

/// An RGB frame with values in `[0, 1]`, stored `h*w*3` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), h * w * 3);
        Frame { h, w, data }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Frame { h, w, data: vec![0.0; h * w * 3] }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Per-channel standardized `(h*w) x 3` matrix.
    pub fn to_input<T: Real>(&self, norm: &Normalization) -> Mat<T> {
        Mat::from_fn(self.h * self.w, 3, |r, c| {
            T::from_f64((self.data[r * 3 + c] as f64 - norm.mean[c]) / norm.std[c])
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| image_err(path, source))?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Ok(Frame { h: h as usize, w: w as usize, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let img = image::RgbImage::from_raw(self.w as u32, self.h as u32, bytes).expect("frame buffer size");
        img.save(path).map_err(|source| image_err(path, source))
    }
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    match source {
        image::ImageError::IoError(e) => io_err(path)(e),
        source => Error::Image { path: path.to_path_buf(), source },
    }
}

pub fn load_mask(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|source| image_err(path, source))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw()))
}

pub fn save_mask(path: &Path, h: usize, w: usize, labels: &[u8]) -> Result<()> {
    let img = image::GrayImage::from_raw(w as u32, h as u32, labels.to_vec()).expect("mask buffer size");
    img.save(path).map_err(|source| image_err(path, source))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mean: [0.5; 3], std: [0.25; 3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// `[height, width]`.
    pub frame_size: [usize; 2],
    pub normalization: Normalization,
    pub videos: Vec<VideoEntry>,
}

impl Manifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(io_err(&path))
    }
}

pub fn frame_path(root: &Path, video: &str, index: usize) -> PathBuf {
    root.join(video).join("frames").join(format!("{index:06}.png"))
}

pub fn mask_path(root: &Path, video: &str, index: usize) -> PathBuf {
    root.join(video).join("masks").join(format!("{index:06}.png"))
}

#[derive(Clone, Debug)]
pub struct Video {
    pub id: String,
    pub frames: Vec<Frame>,
    pub masks: Vec<Option<Vec<u8>>>,
}

impl Video {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn annotated(&self) -> impl Iterator<Item = usize> + '_ {
        self.masks.iter().enumerate().filter(|(_, m)| m.is_some()).map(|(i, _)| i)
    }
}

/// One clip: `n` past frames, the target with its mask, and one distant frame.
#[derive(Clone, Debug)]
pub struct VideoClipSample {
    pub past_frames: Vec<Frame>,
    pub target_frame: Frame,
    pub random_frame: Frame,
    pub target_mask: Vec<u8>,
    /// Masks of the past frames where annotated.
    pub past_masks: Vec<Option<Vec<u8>>>,
    /// Clip timestamps, past frames first and the target last.
    pub timestamps: Vec<usize>,
    pub random_timestamp: usize,
    /// Mask of the random frame where annotated.
    pub random_mask: Option<Vec<u8>>,
    pub h: usize,
    pub w: usize,
}

impl VideoClipSample {
    pub fn clip_frames(&self) -> impl Iterator<Item = &Frame> {
        self.past_frames.iter().chain(std::iter::once(&self.target_frame))
    }

    pub fn target_timestamp(&self) -> usize {
        *self.timestamps.last().expect("non-empty clip")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipSpec {
    /// Number of past frames.
    pub past: usize,
    pub spacing: usize,
}

impl Default for ClipSpec {
    fn default() -> Self {
        ClipSpec { past: 3, spacing: 3 }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub vocab: ClassVocabulary,
    pub manifest: Manifest,
    pub videos: Vec<Video>,
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let vocab = ClassVocabulary::read(root)?;
    let manifest = Manifest::read(root)?;
    let [h, w] = manifest.frame_size;
    let videos = manifest
        .videos
        .par_iter()
        .map(|entry| load_video(root, entry, h, w, &vocab))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { root: root.to_path_buf(), vocab, manifest, videos })
}

fn load_video(root: &Path, entry: &VideoEntry, h: usize, w: usize, vocab: &ClassVocabulary) -> Result<Video> {
    let dir = root.join(&entry.id);
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir));
    }
    let frames_dir = dir.join("frames");
    let on_disk = fs::read_dir(&frames_dir).map_err(io_err(&frames_dir))?.filter(|e| e.is_ok()).count();
    if on_disk != entry.frames {
        return Err(Error::InvalidDataset(format!(
            "video {} lists {} frames but {} has {on_disk}",
            entry.id,
            entry.frames,
            frames_dir.display()
        )));
    }
    let mut frames = Vec::with_capacity(entry.frames);
    let mut masks = Vec::with_capacity(entry.frames);
    for i in 0..entry.frames {
        let fp = frame_path(root, &entry.id, i);
        let frame = Frame::load(&fp)?;
        if (frame.h, frame.w) != (h, w) {
            return Err(Error::InvalidDataset(format!("{} is {}x{}, expected {h}x{w}", fp.display(), frame.h, frame.w)));
        }
        frames.push(frame);
        let mp = mask_path(root, &entry.id, i);
        if mp.exists() {
            let (mh, mw, labels) = load_mask(&mp)?;
            if (mh, mw) != (h, w) {
                return Err(Error::InvalidDataset(format!("{} is {mh}x{mw}, expected {h}x{w}", mp.display())));
            }
            if let Some(&bad) = labels.iter().find(|&&v| v != vocab.ignore_index() && v as usize >= vocab.len()) {
                return Err(Error::InvalidMask { path: mp, value: bad, num_classes: vocab.len(), ignore: vocab.ignore_index() });
            }
            masks.push(Some(labels));
        } else {
            masks.push(None);
        }
    }
    let masks_dir = dir.join("masks");
    if masks_dir.is_dir() {
        let mask_files = fs::read_dir(&masks_dir).map_err(io_err(&masks_dir))?.count();
        let matched = masks.iter().filter(|m| m.is_some()).count();
        if mask_files != matched {
            return Err(Error::InvalidDataset(format!(
                "video {}: {mask_files} mask files but only {matched} match frame indices",
                entry.id
            )));
        }
    }
    Ok(Video { id: entry.id.clone(), frames, masks })
}

impl Dataset {
    pub fn frame_hw(&self) -> (usize, usize) {
        (self.manifest.frame_size[0], self.manifest.frame_size[1])
    }

    pub fn normalization(&self) -> &Normalization {
        &self.manifest.normalization
    }

    /// Every `(video, frame)` pair that has a mask.
    pub fn annotated_targets(&self) -> Vec<(usize, usize)> {
        self.videos.iter().enumerate().flat_map(|(v, video)| video.annotated().map(move |t| (v, t))).collect()
    }

    /// Assembles the clip ending at `target` of video `video`.
    pub fn sample(&self, video: usize, target: usize, clip: ClipSpec, mode: FrameMode, seed: u64) -> Result<VideoClipSample> {
        let v = &self.videos[video];
        let idx = clip_indices_clamped(target, clip.past, clip.spacing, v.len())?;
        let target_mask = v.masks[target]
            .clone()
            .ok_or_else(|| Error::InvalidDataset(format!("video {} frame {target} has no mask", v.id)))?;
        let random = select_random_frame(target, &idx, v.len(), mode, seed)?;
        let (h, w) = (v.frames[target].h, v.frames[target].w);
        Ok(VideoClipSample {
            past_frames: idx[..idx.len() - 1].iter().map(|&i| v.frames[i].clone()).collect(),
            target_frame: v.frames[target].clone(),
            random_frame: v.frames[random].clone(),
            target_mask,
            past_masks: idx[..idx.len() - 1].iter().map(|&i| v.masks[i].clone()).collect(),
            timestamps: idx,
            random_timestamp: random,
            random_mask: v.masks[random].clone(),
            h,
            w,
        })
    }
}
