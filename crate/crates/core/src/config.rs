//! Flat `key = value` configuration shared by the model, trainer and CLI.
//!
//! A config document is either `key = value` lines (`#` starts a comment) or a flat
//! JSON object. Every key has a default; unknown keys are rejected with the list of
//! valid ones.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::clipio::ClipSpec;
use crate::error::{io_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Concat,
    Add,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextRefine {
    Off,
    Mhsa,
    MhsaFfn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextFrames {
    Clip,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Supervision {
    Target,
    PerFrame,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: Vec<usize>,
    pub embed_dim: usize,
    pub pool_ratios: Vec<usize>,
    pub image_encoder: String,
    pub text_encoder: String,
    pub text_buckets: usize,
    pub encoder_weights: String,
    pub templates: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StcfConfig {
    pub raw_affinity: bool,
    pub conv_kernel: usize,
    pub attn_dim: usize,
    /// 1-based index of the shallowest pyramid level that takes part in fusion.
    pub first_level: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RfeConfig {
    pub enabled: bool,
    /// `None` means one region per seen class.
    pub regions: Option<usize>,
    pub heads: usize,
    pub residual: bool,
    pub first_level: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VteConfig {
    pub fusion: Fusion,
    pub text_refine: TextRefine,
    pub pos_channels: usize,
    pub heads: usize,
    pub head_hidden: usize,
    /// Hidden width of the image-guided logit upsampler; 0 upsamples bilinearly.
    pub up_hidden: usize,
    pub text_frames: TextFrames,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub seed: u64,
    pub crop: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub supervision: Supervision,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub grad_clip: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub clip: ClipSpec,
    pub stcf: StcfConfig,
    pub rfe: RfeConfig,
    pub vte: VteConfig,
    pub train: TrainConfig,
    pub mask_unseen: bool,
}

pub const DEFAULT_TEMPLATES: [&str; 3] = ["a photo of a {}", "a video frame of a {}", "there is a {} in the scene"];

impl Default for Config {
    fn default() -> Self {
        Config {
            model: ModelConfig {
                channels: vec![16, 32, 64, 128],
                embed_dim: 32,
                pool_ratios: vec![1, 2, 4],
                image_encoder: "toy-conv".into(),
                text_encoder: "toy-hash".into(),
                text_buckets: 2048,
                encoder_weights: String::new(),
                templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
            },
            clip: ClipSpec::default(),
            stcf: StcfConfig { raw_affinity: false, conv_kernel: 3, attn_dim: 32, first_level: 2 },
            rfe: RfeConfig { enabled: true, regions: None, heads: 4, residual: true, first_level: 2 },
            vte: VteConfig {
                fusion: Fusion::Concat,
                text_refine: TextRefine::MhsaFfn,
                pos_channels: 8,
                heads: 4,
                head_hidden: 16,
                up_hidden: 8,
                text_frames: TextFrames::Clip,
            },
            train: TrainConfig {
                alpha: 1.0,
                beta: 1.0,
                iterations: 2000,
                batch_size: 2,
                lr: 3e-4,
                weight_decay: 1e-2,
                warmup_iters: 100,
                seed: 0,
                crop: 64,
                scale_min: 1.0,
                scale_max: 1.25,
                supervision: Supervision::Target,
                log_every: 10,
                checkpoint_every: 500,
                grad_clip: 0.0,
            },
            mask_unseen: true,
        }
    }
}

pub const KEYS: &[&str] = &[
    "model.channels",
    "model.embed_dim",
    "model.pool_ratios",
    "encoder.image",
    "encoder.text",
    "encoder.text_buckets",
    "encoder.weights",
    "encoder.templates",
    "clip.past",
    "clip.spacing",
    "stcf.raw_affinity",
    "stcf.conv_kernel",
    "stcf.attn_dim",
    "stcf.first_level",
    "rfe.enabled",
    "rfe.regions",
    "rfe.heads",
    "rfe.residual",
    "rfe.first_level",
    "vte.fusion",
    "vte.text_refine",
    "vte.pos_channels",
    "vte.heads",
    "vte.head_hidden",
    "vte.up_hidden",
    "vte.text_frames",
    "train.alpha",
    "train.beta",
    "train.iterations",
    "train.batch_size",
    "train.lr",
    "train.weight_decay",
    "train.warmup_iters",
    "train.seed",
    "train.crop",
    "train.scale_min",
    "train.scale_max",
    "train.supervision",
    "train.log_every",
    "train.checkpoint_every",
    "train.grad_clip",
    "protocol.mask_unseen",
];

/// Keys that change the network's parameters or forward pass.
const MODEL_PREFIXES: &[&str] = &["model.", "encoder.", "clip.", "stcf.", "rfe.", "vte."];

fn bad(key: &str, value: &str, reason: impl fmt::Display) -> Error {
    Error::ConfigValue { key: key.into(), value: value.into(), reason: reason.to_string() }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.trim().parse::<T>().map_err(|e| bad(key, value, e))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(bad(key, value, "expected a boolean")),
    }
}

fn list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|s| num::<usize>(key, s)).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Splits a config document into ordered `(key, value)` pairs without interpreting them.
pub fn parse_document(text: &str) -> Result<Vec<(String, String)>> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let v: serde_json::Value =
            serde_json::from_str(trimmed).map_err(|e| Error::Invalid(format!("config json: {e}")))?;
        let obj = v.as_object().ok_or_else(|| Error::Invalid("config json must be an object".into()))?;
        return obj
            .iter()
            .map(|(k, v)| {
                let s = match v {
                    serde_json::Value::String(s) => s.clone(),
                    serde_json::Value::Number(n) => n.to_string(),
                    serde_json::Value::Bool(b) => b.to_string(),
                    serde_json::Value::Array(items) => items
                        .iter()
                        .map(|x| match x {
                            serde_json::Value::String(s) => s.clone(),
                            other => other.to_string(),
                        })
                        .collect::<Vec<_>>()
                        .join(if k == "encoder.templates" { "|" } else { "," }),
                    other => return Err(bad(k, &other.to_string(), "nested values are not allowed")),
                };
                Ok((k.clone(), s))
            })
            .collect();
    }
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("config line {}: expected `key = value`", lineno + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Config::default();
        cfg.apply_document(&text)?;
        Ok(cfg)
    }

    pub fn apply_document(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_document(text)? {
            self.set(&k, &v)?;
        }
        self.validate()
    }

    /// Applies `key=value` override strings, as given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Invalid(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model.channels" => self.model.channels = list(key, v)?,
            "model.embed_dim" => self.model.embed_dim = num(key, v)?,
            "model.pool_ratios" => self.model.pool_ratios = list(key, v)?,
            "encoder.image" => self.model.image_encoder = v.to_string(),
            "encoder.text" => self.model.text_encoder = v.to_string(),
            "encoder.text_buckets" => self.model.text_buckets = num(key, v)?,
            "encoder.weights" => self.model.encoder_weights = v.to_string(),
            "encoder.templates" => self.model.templates = v.split('|').map(|s| s.trim().to_string()).collect(),
            "clip.past" => self.clip.past = num(key, v)?,
            "clip.spacing" => self.clip.spacing = num(key, v)?,
            "stcf.raw_affinity" => self.stcf.raw_affinity = flag(key, v)?,
            "stcf.conv_kernel" => self.stcf.conv_kernel = num(key, v)?,
            "stcf.attn_dim" => self.stcf.attn_dim = num(key, v)?,
            "stcf.first_level" => self.stcf.first_level = num(key, v)?,
            "rfe.enabled" => self.rfe.enabled = flag(key, v)?,
            "rfe.regions" => self.rfe.regions = if v == "auto" { None } else { Some(num(key, v)?) },
            "rfe.heads" => self.rfe.heads = num(key, v)?,
            "rfe.residual" => self.rfe.residual = flag(key, v)?,
            "rfe.first_level" => self.rfe.first_level = num(key, v)?,
            "vte.fusion" => {
                self.vte.fusion = match v {
                    "concat" => Fusion::Concat,
                    "add" => Fusion::Add,
                    _ => return Err(bad(key, v, "expected concat or add")),
                }
            }
            "vte.text_refine" => {
                self.vte.text_refine = match v {
                    "off" => TextRefine::Off,
                    "mhsa" => TextRefine::Mhsa,
                    "mhsa+ffn" => TextRefine::MhsaFfn,
                    _ => return Err(bad(key, v, "expected off, mhsa or mhsa+ffn")),
                }
            }
            "vte.pos_channels" => self.vte.pos_channels = num(key, v)?,
            "vte.heads" => self.vte.heads = num(key, v)?,
            "vte.head_hidden" => self.vte.head_hidden = num(key, v)?,
            "vte.up_hidden" => self.vte.up_hidden = num(key, v)?,
            "vte.text_frames" => {
                self.vte.text_frames = match v {
                    "clip" => TextFrames::Clip,
                    "target" => TextFrames::Target,
                    _ => return Err(bad(key, v, "expected clip or target")),
                }
            }
            "train.alpha" => self.train.alpha = num(key, v)?,
            "train.beta" => self.train.beta = num(key, v)?,
            "train.iterations" => self.train.iterations = num(key, v)?,
            "train.batch_size" => self.train.batch_size = num(key, v)?,
            "train.lr" => self.train.lr = num(key, v)?,
            "train.weight_decay" => self.train.weight_decay = num(key, v)?,
            "train.warmup_iters" => self.train.warmup_iters = num(key, v)?,
            "train.seed" => self.train.seed = num(key, v)?,
            "train.crop" => self.train.crop = num(key, v)?,
            "train.scale_min" => self.train.scale_min = num(key, v)?,
            "train.scale_max" => self.train.scale_max = num(key, v)?,
            "train.supervision" => {
                self.train.supervision = match v {
                    "target" => Supervision::Target,
                    "per_frame" => Supervision::PerFrame,
                    _ => return Err(bad(key, v, "expected target or per_frame")),
                }
            }
            "train.log_every" => self.train.log_every = num(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = num(key, v)?,
            "train.grad_clip" => self.train.grad_clip = num(key, v)?,
            "protocol.mask_unseen" => self.mask_unseen = flag(key, v)?,
            _ => {
                return Err(Error::UnknownConfigKey {
                    key: key.to_string(),
                    valid: KEYS.iter().map(|s| s.to_string()).collect(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let levels = m.channels.len();
        if levels < 2 {
            return Err(bad("model.channels", &join(&m.channels), "need at least two pyramid levels"));
        }
        if m.channels.contains(&0) || m.embed_dim == 0 {
            return Err(bad("model.channels", &join(&m.channels), "widths must be positive"));
        }
        if m.pool_ratios.is_empty() || m.pool_ratios.contains(&0) {
            return Err(bad("model.pool_ratios", &join(&m.pool_ratios), "ratios must be positive"));
        }
        if m.text_buckets == 0 {
            return Err(bad("encoder.text_buckets", "0", "must be positive"));
        }
        if m.templates.is_empty() {
            return Err(bad("encoder.templates", "", "at least one template"));
        }
        for (key, lvl) in [("stcf.first_level", self.stcf.first_level), ("rfe.first_level", self.rfe.first_level)] {
            if lvl == 0 || lvl > levels {
                return Err(bad(key, &lvl.to_string(), format!("must be in 1..={levels}")));
            }
        }
        if self.stcf.conv_kernel % 2 == 0 {
            return Err(bad("stcf.conv_kernel", &self.stcf.conv_kernel.to_string(), "must be odd"));
        }
        if self.stcf.attn_dim == 0 || self.vte.pos_channels == 0 || self.vte.head_hidden == 0 {
            return Err(Error::Invalid("attention and head widths must be positive".into()));
        }
        if self.rfe.heads == 0 || m.embed_dim % self.rfe.heads != 0 {
            return Err(Error::HeadsNotDivisible { channels: m.embed_dim, heads: self.rfe.heads });
        }
        if self.vte.heads == 0 || m.embed_dim % self.vte.heads != 0 {
            return Err(Error::HeadsNotDivisible { channels: m.embed_dim, heads: self.vte.heads });
        }
        if self.rfe.regions == Some(0) {
            return Err(bad("rfe.regions", "0", "must be positive or auto"));
        }
        if self.clip.spacing == 0 {
            return Err(bad("clip.spacing", "0", "must be positive"));
        }
        let t = &self.train;
        if !(t.alpha >= 0.0 && t.beta >= 0.0) {
            return Err(bad("train.alpha", &t.alpha.to_string(), "loss weights must be nonnegative"));
        }
        if !(t.lr > 0.0) || !(t.weight_decay >= 0.0) {
            return Err(bad("train.lr", &t.lr.to_string(), "lr must be positive, weight decay nonnegative"));
        }
        if t.warmup_iters > t.iterations && t.iterations > 0 {
            return Err(bad("train.warmup_iters", &t.warmup_iters.to_string(), "must not exceed train.iterations"));
        }
        if t.batch_size == 0 {
            return Err(bad("train.batch_size", "0", "must be positive"));
        }
        if !(t.scale_min > 0.0 && t.scale_min <= t.scale_max) {
            return Err(bad("train.scale_min", &t.scale_min.to_string(), "need 0 < scale_min <= scale_max"));
        }
        let divisor = 1usize << levels;
        if t.crop == 0 || t.crop % divisor != 0 {
            return Err(Error::IndivisibleInput { h: t.crop, w: t.crop, divisor });
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let m = &self.model;
        let t = &self.train;
        let b = |x: bool| x.to_string();
        let pairs: Vec<(&str, String)> = vec![
            ("model.channels", join(&m.channels)),
            ("model.embed_dim", m.embed_dim.to_string()),
            ("model.pool_ratios", join(&m.pool_ratios)),
            ("encoder.image", m.image_encoder.clone()),
            ("encoder.text", m.text_encoder.clone()),
            ("encoder.text_buckets", m.text_buckets.to_string()),
            ("encoder.weights", m.encoder_weights.clone()),
            ("encoder.templates", m.templates.join("|")),
            ("clip.past", self.clip.past.to_string()),
            ("clip.spacing", self.clip.spacing.to_string()),
            ("stcf.raw_affinity", b(self.stcf.raw_affinity)),
            ("stcf.conv_kernel", self.stcf.conv_kernel.to_string()),
            ("stcf.attn_dim", self.stcf.attn_dim.to_string()),
            ("stcf.first_level", self.stcf.first_level.to_string()),
            ("rfe.enabled", b(self.rfe.enabled)),
            ("rfe.regions", self.rfe.regions.map_or("auto".into(), |k| k.to_string())),
            ("rfe.heads", self.rfe.heads.to_string()),
            ("rfe.residual", b(self.rfe.residual)),
            ("rfe.first_level", self.rfe.first_level.to_string()),
            (
                "vte.fusion",
                match self.vte.fusion {
                    Fusion::Concat => "concat",
                    Fusion::Add => "add",
                }
                .into(),
            ),
            (
                "vte.text_refine",
                match self.vte.text_refine {
                    TextRefine::Off => "off",
                    TextRefine::Mhsa => "mhsa",
                    TextRefine::MhsaFfn => "mhsa+ffn",
                }
                .into(),
            ),
            ("vte.pos_channels", self.vte.pos_channels.to_string()),
            ("vte.heads", self.vte.heads.to_string()),
            ("vte.head_hidden", self.vte.head_hidden.to_string()),
            ("vte.up_hidden", self.vte.up_hidden.to_string()),
            (
                "vte.text_frames",
                match self.vte.text_frames {
                    TextFrames::Clip => "clip",
                    TextFrames::Target => "target",
                }
                .into(),
            ),
            ("train.alpha", t.alpha.to_string()),
            ("train.beta", t.beta.to_string()),
            ("train.iterations", t.iterations.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.warmup_iters", t.warmup_iters.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.crop", t.crop.to_string()),
            ("train.scale_min", t.scale_min.to_string()),
            ("train.scale_max", t.scale_max.to_string()),
            (
                "train.supervision",
                match t.supervision {
                    Supervision::Target => "target",
                    Supervision::PerFrame => "per_frame",
                }
                .into(),
            ),
            ("train.log_every", t.log_every.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.grad_clip", t.grad_clip.to_string()),
            ("protocol.mask_unseen", b(self.mask_unseen)),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Rebuilds a config from [`Config::entries`] output.
    pub fn from_entries(entries: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Config::default();
        for (k, v) in entries {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_document(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Short hash of every setting; used to name result files.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_document().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    /// True when both configs build the same network.
    pub fn same_model(&self, other: &Config) -> bool {
        let a = self.entries();
        let b = other.entries();
        a.iter().filter(|(k, _)| MODEL_PREFIXES.iter().any(|p| k.starts_with(p))).all(|(k, v)| b.get(k) == Some(v))
    }

    pub fn levels(&self) -> usize {
        self.model.channels.len()
    }
}
