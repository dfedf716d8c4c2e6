//! Open-vocabulary evaluation: seen/unseen splits, inference over annotated frames
//! with the full vocabulary presented, cross-dataset transfer and the random baseline.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autograd::Tape;
use crate::checkpoint::{write_atomic, Checkpoint};
use crate::clipio::{clip_indices_clamped, select_random_frame, ClassVocabulary, Dataset, FrameMode, Video};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::metrics::{ConfusionAccumulator, MetricsReport};
use crate::model::{ClipInput, Model};
use crate::params::ParamStore;
use crate::vte::argmax_rows;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabSplit {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

/// The first `n_seen` classes are seen, the rest unseen.
pub fn split_vocabulary(vocab_size: usize, n_seen: usize) -> Result<VocabSplit> {
    if n_seen == 0 || n_seen >= vocab_size {
        return Err(Error::InvalidVocabulary(format!("need 0 < seen ({n_seen}) < vocabulary size ({vocab_size})")));
    }
    Ok(VocabSplit { seen: (0..n_seen).collect(), unseen: (n_seen..vocab_size).collect() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassFilter {
    All,
    Seen,
    Unseen,
}

impl ClassFilter {
    pub fn classes(self, vocab: &ClassVocabulary) -> Option<Vec<usize>> {
        match self {
            ClassFilter::All => None,
            ClassFilter::Seen => Some(vocab.seen().to_vec()),
            ClassFilter::Unseen => Some(vocab.unseen().to_vec()),
        }
    }
}

impl FromStr for ClassFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(ClassFilter::All),
            "seen" => Ok(ClassFilter::Seen),
            "unseen" => Ok(ClassFilter::Unseen),
            _ => Err(Error::Invalid(format!("filter must be all, seen or unseen, not {s:?}"))),
        }
    }
}

impl fmt::Display for ClassFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassFilter::All => "all",
            ClassFilter::Seen => "seen",
            ClassFilter::Unseen => "unseen",
        })
    }
}

/// Inference input for frame `target` of `video` (most distant frame as the random frame).
pub fn inference_input(cfg: &Config, data: &Dataset, video: &Video, target: usize) -> Result<ClipInput<f32>> {
    let idx = clip_indices_clamped(target, cfg.clip.past, cfg.clip.spacing, video.len())?;
    let norm = data.normalization();
    let random = if cfg.rfe.enabled {
        let r = select_random_frame(target, &idx, video.len(), FrameMode::Infer, 0)?;
        Some(video.frames[r].to_input(norm))
    } else {
        None
    };
    let f = &video.frames[target];
    Ok(ClipInput { frames: idx.iter().map(|&i| video.frames[i].to_input(norm)).collect(), random, h: f.h, w: f.w })
}

/// A trained network ready for inference.
pub struct Predictor {
    pub cfg: Config,
    pub model: Model,
    pub store: ParamStore<f32>,
}

impl Predictor {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (model, store) = ck.build_model()?;
        Ok(Predictor { cfg: ck.config()?, model, store })
    }

    /// Raw logits (`(h*w) x N`, row-major) for one frame.
    pub fn logits(&self, data: &Dataset, video: &Video, target: usize, names: &[String]) -> Result<crate::tensor::Mat<f32>> {
        let input = inference_input(&self.cfg, data, video, target)?;
        let mut t = Tape::new(&self.store);
        let p = self.model.forward(&mut t, &input, names)?;
        Ok(t.value(p.logits.v).clone())
    }

    /// Label map for one frame: the argmax over presented classes.
    pub fn predict(&self, data: &Dataset, video: &Video, target: usize, names: &[String]) -> Result<Vec<u8>> {
        let logits = self.logits(data, video, target, names)?;
        Ok(argmax_rows(&logits).into_iter().map(|c| c as u8).collect())
    }

    /// Confusion over every annotated frame, parallel across videos.
    pub fn confusion(&self, data: &Dataset, names: &[String]) -> Result<ConfusionAccumulator> {
        if names.len() > data.vocab.ignore_index() as usize {
            return Err(Error::InvalidVocabulary(format!("{} classes do not fit 8-bit labels", names.len())));
        }
        let per_video: Vec<Result<ConfusionAccumulator>> = data
            .videos
            .par_iter()
            .map(|video| {
                let mut acc = ConfusionAccumulator::new(names.len(), data.vocab.ignore_index());
                for target in video.annotated() {
                    let pred = self.predict(data, video, target, names)?;
                    acc.accumulate(&pred, video.masks[target].as_ref().expect("annotated"))?;
                }
                Ok(acc)
            })
            .collect();
        let mut total = ConfusionAccumulator::new(names.len(), data.vocab.ignore_index());
        for acc in per_video {
            total.merge(&acc?)?;
        }
        Ok(total)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub filter: ClassFilter,
    pub class_names: Vec<String>,
    pub fingerprint: String,
    pub metrics: MetricsReport,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `<stem>_<fingerprint>.json` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        let path = dir.join(format!("{stem}_{}.json", self.fingerprint));
        write_atomic(&path, self.to_json().as_bytes())?;
        Ok(path)
    }
}

/// Evaluates on a dataset sharing the checkpoint's vocabulary, presenting every class.
pub fn evaluate(ck: &Checkpoint, data: &Dataset, filter: ClassFilter) -> Result<EvalReport> {
    let theirs = &ck.header.vocab;
    if theirs.names() != data.vocab.names() {
        return Err(Error::VocabularyMismatch(format!(
            "checkpoint has [{}], dataset has [{}]",
            theirs.names().join(", "),
            data.vocab.names().join(", ")
        )));
    }
    cross_dataset_eval(ck, data, filter)
}

/// Evaluates on any dataset, embedding its own class names; no vocabulary check.
pub fn cross_dataset_eval(ck: &Checkpoint, data: &Dataset, filter: ClassFilter) -> Result<EvalReport> {
    let p = Predictor::from_checkpoint(ck)?;
    let names = data.vocab.names().to_vec();
    let acc = p.confusion(data, &names)?;
    let metrics = acc.finalize(filter.classes(&data.vocab).as_deref())?;
    Ok(EvalReport { filter, class_names: names, fingerprint: p.cfg.fingerprint(), metrics })
}

/// Expected IoU of class `c` under uniform random assignment over `n` classes, in the
/// large-sample limit: `f / (1 + (n - 1) f)` with `f` the class's pixel share.
pub fn analytic_random_miou(gt_totals: &[u64], n: usize, filter: Option<&[usize]>) -> f64 {
    let total: u64 = gt_totals.iter().sum();
    let classes: Vec<usize> = filter.map_or_else(|| (0..gt_totals.len()).collect(), |f| f.to_vec());
    let ious: Vec<f64> = classes
        .iter()
        .map(|&c| {
            let f = gt_totals[c] as f64 / total as f64;
            f / (1.0 + (n as f64 - 1.0) * f)
        })
        .collect();
    ious.iter().sum::<f64>() / ious.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Baseline {
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
}

/// Monte-Carlo mIoU of a predictor that labels every non-ignored pixel uniformly at
/// random among `n` classes, on ground truth with the given per-class totals.
pub fn monte_carlo_random_miou(gt_totals: &[u64], n: usize, filter: Option<&[usize]>, trials: usize, seed: u64) -> Result<Baseline> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vals = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut acc = ConfusionAccumulator::new(n, 255);
        for (c, &t) in gt_totals.iter().enumerate() {
            for _ in 0..t {
                acc.counts[c * n + rng.gen_range(0..n)] += 1;
            }
        }
        vals.push(acc.finalize(filter)?.miou);
    }
    let mean = vals.iter().sum::<f64>() / trials as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials.max(2) - 1) as f64;
    Ok(Baseline { mean, std: var.sqrt(), trials })
}
