//! Training: the weighted main/auxiliary loss, open-vocabulary masking, augmentation,
//! AdamW with linear warm-up, and the deterministic batch loop.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::Tape;
use crate::checkpoint::{copy_params, Checkpoint};
use crate::clipio::{ClassVocabulary, Dataset, Frame, FrameMode, VideoClipSample};
use crate::config::{Config, Supervision};
use crate::error::{io_err, Error, Result};
use crate::model::{ClipInput, Model};
use crate::params::ParamStore;
use crate::resample::{resample_labels, ResampleMode, ResamplePlan};
use crate::tensor::Mat;

/// `alpha * l_main + beta * l_aux`.
pub fn combine_loss(l_main: f64, l_aux: f64, alpha: f64, beta: f64) -> f64 {
    alpha * l_main + beta * l_aux
}

/// Learning rate after `step` updates: a linear ramp to `base` over `warmup` steps.
pub fn lr_at(base: f64, warmup: usize, step: usize) -> f64 {
    if warmup == 0 {
        base
    } else {
        base * (step as f64 / warmup as f64).min(1.0)
    }
}

/// Mixes two words into a seed (splitmix64 finalizer).
pub fn derive_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unseen_footprint(mask: &[u8], vocab: &ClassVocabulary) -> Vec<bool> {
    mask.iter().map(|&v| v != vocab.ignore_index() && vocab.is_unseen(v as usize)).collect()
}

fn ignore_unseen(mask: &mut [u8], vocab: &ClassVocabulary) {
    for v in mask {
        if *v != vocab.ignore_index() && vocab.is_unseen(*v as usize) {
            *v = vocab.ignore_index();
        }
    }
}

fn zero_pixels(frame: &mut Frame, a: &[bool], b: Option<&[bool]>) {
    for p in 0..frame.h * frame.w {
        if a[p] || b.is_some_and(|b| b[p]) {
            frame.data[p * 3..p * 3 + 3].fill(0.0);
        }
    }
}

/// Hides unseen classes from a training sample.
///
/// Unseen labels become the ignore index in every mask. Frame pixels are zeroed under
/// the target's unseen footprint, plus the frame's own unseen footprint where that
/// frame is annotated.
pub fn mask_unseen(sample: &VideoClipSample, vocab: &ClassVocabulary) -> VideoClipSample {
    let mut out = sample.clone();
    let target = unseen_footprint(&sample.target_mask, vocab);
    zero_pixels(&mut out.target_frame, &target, None);
    for (frame, mask) in out.past_frames.iter_mut().zip(&sample.past_masks) {
        let own = mask.as_ref().map(|m| unseen_footprint(m, vocab));
        zero_pixels(frame, &target, own.as_deref());
    }
    let own = sample.random_mask.as_ref().map(|m| unseen_footprint(m, vocab));
    zero_pixels(&mut out.random_frame, &target, own.as_deref());
    ignore_unseen(&mut out.target_mask, vocab);
    for m in out.past_masks.iter_mut().chain(std::iter::once(&mut out.random_mask)).flatten() {
        ignore_unseen(m, vocab);
    }
    out
}

/// A random rescale followed by a crop, shared by every frame and mask of a clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    pub in_hw: (usize, usize),
    pub scaled_hw: (usize, usize),
    pub y0: usize,
    pub x0: usize,
    pub crop: usize,
}

impl Augment {
    pub fn draw(in_hw: (usize, usize), crop: usize, scale_min: f64, scale_max: f64, rng: &mut impl Rng) -> Result<Self> {
        let s = if scale_max > scale_min { rng.gen_range(scale_min..=scale_max) } else { scale_min };
        let scaled_hw = ((in_hw.0 as f64 * s).round() as usize, (in_hw.1 as f64 * s).round() as usize);
        if scaled_hw.0 < crop || scaled_hw.1 < crop {
            return Err(Error::Invalid(format!(
                "crop {crop} does not fit a {}x{} frame scaled by {s:.3}",
                in_hw.0, in_hw.1
            )));
        }
        let y0 = rng.gen_range(0..=scaled_hw.0 - crop);
        let x0 = rng.gen_range(0..=scaled_hw.1 - crop);
        Ok(Augment { in_hw, scaled_hw, y0, x0, crop })
    }

    fn crop_rows<T: Copy>(&self, data: &[T], ch: usize) -> Vec<T> {
        let w = self.scaled_hw.1;
        let mut out = Vec::with_capacity(self.crop * self.crop * ch);
        for y in self.y0..self.y0 + self.crop {
            let start = (y * w + self.x0) * ch;
            out.extend_from_slice(&data[start..start + self.crop * ch]);
        }
        out
    }

    /// Bilinear rescale, then crop.
    pub fn frame(&self, f: &Frame) -> Frame {
        let plan = ResamplePlan::new(1, self.in_hw, self.scaled_hw, ResampleMode::Bilinear);
        let m = Mat::from_vec(f.h * f.w, 3, f.data.clone());
        let scaled = if plan.is_identity() { m } else { plan.apply(&m) };
        Frame::new(self.crop, self.crop, self.crop_rows(scaled.data(), 3))
    }

    /// Nearest-neighbour rescale, then crop.
    pub fn mask(&self, m: &[u8]) -> Vec<u8> {
        let scaled = resample_labels(m, self.in_hw, self.scaled_hw);
        self.crop_rows(&scaled, 1)
    }

    pub fn sample(&self, s: &VideoClipSample) -> VideoClipSample {
        VideoClipSample {
            past_frames: s.past_frames.iter().map(|f| self.frame(f)).collect(),
            target_frame: self.frame(&s.target_frame),
            random_frame: self.frame(&s.random_frame),
            target_mask: self.mask(&s.target_mask),
            past_masks: s.past_masks.iter().map(|m| m.as_deref().map(|m| self.mask(m))).collect(),
            timestamps: s.timestamps.clone(),
            random_timestamp: s.random_timestamp,
            random_mask: s.random_mask.as_deref().map(|m| self.mask(m)),
            h: self.crop,
            w: self.crop,
        }
    }
}

/// Decoupled-weight-decay Adam. Decay applies to matrices with more than one row;
/// `1 x C` biases are not decayed.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros = || store.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Mat<f32>>], lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let p = store.get_mut(id);
            let decay = if p.rows() > 1 { lr * weight_decay } else { 0.0 };
            let g = grads.get(i).and_then(|g| g.as_ref());
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g.data()[j] as f64);
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gj;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gj * gj;
                let upd = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                let xv = *x as f64;
                *x = (xv - decay * xv - lr * upd) as f32;
            }
        }
    }
}

/// Vocabulary indices the model is trained against: the seen classes when unseen
/// classes are masked, otherwise the whole vocabulary.
pub fn presented_classes(cfg: &Config, vocab: &ClassVocabulary) -> Vec<usize> {
    if cfg.mask_unseen {
        vocab.seen().to_vec()
    } else {
        (0..vocab.len()).collect()
    }
}

/// Network inputs and loss targets for one training sample.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub input: ClipInput<f32>,
    /// `(clip frame index, per-pixel target)` for each supervised frame.
    pub main: Vec<(usize, Arc<Vec<Option<u32>>>)>,
    /// Auxiliary targets on `O_t`'s grid, aligned with `main`.
    pub aux: Vec<Arc<Vec<Option<u32>>>>,
    /// Supervised pixels whose unmasked label is an unseen class.
    pub leaked: u64,
    pub supervised: u64,
}

struct Targets {
    lookup: Vec<Option<u32>>,
    unseen: Vec<bool>,
}

impl Targets {
    fn new(vocab: &ClassVocabulary, presented: &[usize]) -> Self {
        let mut lookup = vec![None; 256];
        for (pos, &c) in presented.iter().enumerate() {
            lookup[c] = Some(pos as u32);
        }
        let unseen = (0..256).map(|v| v < vocab.len() && vocab.is_unseen(v)).collect();
        Targets { lookup, unseen }
    }

    /// Targets from the masked labels, audited against the unmasked ones.
    fn build(&self, masked: &[u8], raw: &[u8], leaked: &mut u64, supervised: &mut u64) -> Arc<Vec<Option<u32>>> {
        let t: Vec<Option<u32>> = masked.iter().map(|&v| self.lookup[v as usize]).collect();
        for (x, &r) in t.iter().zip(raw) {
            if x.is_some() {
                *supervised += 1;
                if self.unseen[r as usize] {
                    *leaked += 1;
                }
            }
        }
        Arc::new(t)
    }
}

/// Draws, augments and masks one training sample.
pub fn prepare_sample(
    cfg: &Config,
    data: &Dataset,
    presented: &[usize],
    video: usize,
    target: usize,
    seed: u64,
) -> Result<PreparedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = data.sample(video, target, cfg.clip, FrameMode::Train, rng.gen())?;
    let t = &cfg.train;
    let aug = Augment::draw((raw.h, raw.w), t.crop, t.scale_min, t.scale_max, &mut rng)?;
    let raw = aug.sample(&raw);
    let masked = if cfg.mask_unseen { mask_unseen(&raw, &data.vocab) } else { raw.clone() };
    let targets = Targets::new(&data.vocab, presented);
    let div = 1usize << cfg.stcf.first_level;
    let aux_hw = (masked.h / div, masked.w / div);
    let hw = (masked.h, masked.w);

    let mut frames: Vec<(usize, &[u8], &[u8])> = Vec::new();
    if t.supervision == Supervision::PerFrame {
        for (i, (m, r)) in masked.past_masks.iter().zip(&raw.past_masks).enumerate() {
            if let (Some(m), Some(r)) = (m, r) {
                frames.push((i, m, r));
            }
        }
    }
    frames.push((masked.past_frames.len(), &masked.target_mask, &raw.target_mask));

    let (mut leaked, mut supervised) = (0, 0);
    let mut main = Vec::with_capacity(frames.len());
    let mut aux = Vec::with_capacity(frames.len());
    for (i, m, r) in frames {
        main.push((i, targets.build(m, r, &mut leaked, &mut supervised)));
        let (ms, rs) = (resample_labels(m, hw, aux_hw), resample_labels(r, hw, aux_hw));
        aux.push(targets.build(&ms, &rs, &mut leaked, &mut supervised));
    }
    let input = ClipInput::from_sample(&masked, data.normalization());
    Ok(PreparedSample { input, main, aux, leaked, supervised })
}

/// Loss values and parameter gradients of one sample.
pub struct SampleGrad {
    pub l_main: f64,
    pub l_aux: f64,
    pub loss: f64,
    pub grads: Vec<Option<Mat<f32>>>,
}

pub fn sample_gradients(
    model: &Model,
    store: &ParamStore<f32>,
    s: &PreparedSample,
    names: &[String],
    alpha: f64,
    beta: f64,
) -> Result<SampleGrad> {
    let mut t = Tape::new(store);
    let targets: Vec<usize> = s.main.iter().map(|(i, _)| *i).collect();
    let preds = model.forward_targets(&mut t, &s.input, names, &targets)?;
    let inv = 1.0 / preds.len() as f32;
    let mut main = Vec::with_capacity(preds.len());
    let mut aux = Vec::with_capacity(preds.len());
    for ((p, (_, tm)), ta) in preds.iter().zip(&s.main).zip(&s.aux) {
        main.push(t.cross_entropy(p.logits.v, tm.clone()));
        aux.push(t.cross_entropy(p.aux.v, ta.clone()));
    }
    let sum = |t: &mut Tape<f32>, xs: &[crate::autograd::Var]| {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = t.add(acc, x);
        }
        t.scale(acc, inv)
    };
    let l_main = sum(&mut t, &main);
    let l_aux = sum(&mut t, &aux);
    let a = t.scale(l_main, alpha as f32);
    let b = t.scale(l_aux, beta as f32);
    let loss = t.add(a, b);
    let (lm, la) = (t.scalar(l_main) as f64, t.scalar(l_aux) as f64);
    let grads = t.backward(loss).into_params();
    Ok(SampleGrad { l_main: lm, l_aux: la, loss: combine_loss(lm, la, alpha, beta), grads })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub l_main: f64,
    pub l_aux: f64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub store: ParamStore<f32>,
    pub presented: Vec<usize>,
    /// One row per iteration.
    pub history: Vec<LogRow>,
    /// Supervised pixels (main and auxiliary) whose true label is unseen.
    pub leaked_pixels: u64,
    pub supervised_pixels: u64,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &Config, vocab: &ClassVocabulary) -> Checkpoint {
        Checkpoint::new(cfg, vocab, &self.presented, self.history.len(), &self.store)
    }
}

/// Initializes a model for `data`, loading backbone weights from
/// `encoder.weights` when set.
pub fn init_model(cfg: &Config, presented: usize) -> Result<(Model, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let model = Model::new(cfg, presented, &mut store)?;
    if !cfg.model.encoder_weights.is_empty() {
        let src = Checkpoint::load(Path::new(&cfg.model.encoder_weights))?;
        let n = copy_params(&src.store, &mut store, |n| n.starts_with("backbone."), false)?;
        if n == 0 {
            return Err(Error::Checkpoint(format!("{} holds no backbone parameters", cfg.model.encoder_weights)));
        }
    }
    Ok((model, store))
}

fn global_clip(grads: &mut [Option<Mat<f32>>], max_norm: f64) {
    let sq: f64 = grads.iter().flatten().flat_map(|g| g.data()).map(|&x| (x as f64) * (x as f64)).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }
}

/// Runs `train.iterations` updates. With `out`, writes `train_log.csv`, periodic
/// `checkpoint_<iter>.bin` files and the final `checkpoint.bin` there.
pub fn train_loop(cfg: &Config, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pool = data.annotated_targets();
    if pool.is_empty() {
        return Err(Error::InvalidDataset("no annotated frames to train on".into()));
    }
    let presented = presented_classes(cfg, &data.vocab);
    let names: Vec<String> = presented.iter().map(|&i| data.vocab.names()[i].clone()).collect();
    let (model, mut store) = init_model(cfg, presented.len())?;
    let mut opt = AdamW::new(&store);
    let t = &cfg.train;

    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("train_log.csv");
            let mut f = fs::File::create(&path).map_err(io_err(&path))?;
            writeln!(f, "iteration,l_main,l_aux,loss,lr").map_err(io_err(&path))?;
            Some((f, path))
        }
        None => None,
    };

    let mut history = Vec::with_capacity(t.iterations);
    let (mut leaked, mut supervised) = (0u64, 0u64);
    for iter in 0..t.iterations {
        let batch_seed = derive_seed(t.seed, iter as u64);
        let results: Vec<Result<(SampleGrad, u64, u64)>> = (0..t.batch_size)
            .into_par_iter()
            .map(|b| {
                let seed = derive_seed(batch_seed, b as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (video, target) = pool[rng.gen_range(0..pool.len())];
                let s = prepare_sample(cfg, data, &presented, video, target, rng.gen())?;
                let g = sample_gradients(&model, &store, &s, &names, t.alpha, t.beta)?;
                Ok((g, s.leaked, s.supervised))
            })
            .collect();
        let mut total: Vec<Option<Mat<f32>>> = vec![None; store.len()];
        let (mut lm, mut la) = (0.0, 0.0);
        for r in results {
            let (g, l, s) = r?;
            leaked += l;
            supervised += s;
            lm += g.l_main;
            la += g.l_aux;
            for (acc, gi) in total.iter_mut().zip(g.grads) {
                match (acc.as_mut(), gi) {
                    (Some(a), Some(gi)) => a.add_assign(&gi),
                    (None, Some(gi)) => *acc = Some(gi),
                    _ => {}
                }
            }
        }
        let inv = 1.0 / t.batch_size as f64;
        let (lm, la) = (lm * inv, la * inv);
        let loss = combine_loss(lm, la, t.alpha, t.beta);
        let finite = loss.is_finite() && total.iter().flatten().all(|g| g.all_finite());
        if !finite {
            return Err(Error::NonFiniteLoss { iteration: iter, batch_seed });
        }
        for g in total.iter_mut().flatten() {
            g.scale_assign(inv as f32);
        }
        if t.grad_clip > 0.0 {
            global_clip(&mut total, t.grad_clip);
        }
        let lr = lr_at(t.lr, t.warmup_iters, iter + 1);
        opt.step(&mut store, &total, lr, t.weight_decay);
        let row = LogRow { iteration: iter, l_main: lm, l_aux: la, loss, lr };
        history.push(row);

        let done = iter + 1;
        if let Some((f, path)) = log.as_mut() {
            if done % t.log_every.max(1) == 0 || done == t.iterations || iter == 0 {
                writeln!(f, "{},{:.6},{:.6},{:.6},{:.6e}", iter, lm, la, loss, lr).map_err(io_err(path.as_path()))?;
            }
        }
        if let Some(dir) = out {
            if t.checkpoint_every > 0 && done % t.checkpoint_every == 0 && done < t.iterations {
                Checkpoint::new(cfg, &data.vocab, &presented, done, &store).save(&dir.join(format!("checkpoint_{done:06}.bin")))?;
            }
        }
    }
    let outcome = TrainOutcome { store, presented, history, leaked_pixels: leaked, supervised_pixels: supervised };
    if let Some(dir) = out {
        outcome.checkpoint(cfg, &data.vocab).save(&dir.join("checkpoint.bin"))?;
    }
    Ok(outcome)
}
