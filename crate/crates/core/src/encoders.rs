//! Image backbone with pooling enhancement, and the prompt-ensembled text encoder.
//!
//! Both encoders sit behind small registries keyed by config strings: `encoder.image`
//! (only `toy-conv`) and `encoder.text` (`toy-hash`, or any [`StringEmbedder`] supplied
//! programmatically as a frozen encoder).

use std::sync::Arc;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{resize, Conv2d, Fmap, Linear};
use crate::params::{Init, ParamBuilder, ParamId};
use crate::resample::ResampleMode;
use crate::tensor::{Mat, Real};

/// Per-scale feature maps of one frame, shallowest (highest resolution) first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Fmap>,
}

impl FeaturePyramid {
    /// Level `l` with 1-based numbering.
    pub fn level(&self, l: usize) -> Fmap {
        self.levels[l - 1]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Strided convolutional pyramid: each stage halves the grid with a 3x3 stride-2
/// convolution, then mixes with a 3x3 stride-1 convolution; both followed by ReLU.
#[derive(Clone, Debug)]
pub struct ToyBackbone {
    stages: Vec<(Conv2d, Conv2d)>,
    channels: Vec<usize>,
}

impl ToyBackbone {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, channels: &[usize]) -> Self {
        let mut cin = 3;
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let down =
                    Conv2d::new(pb, &format!("backbone.stage{}.down", i + 1), cin, c, 3, 2, true, Init::FanIn(2f64.sqrt()));
                let mix =
                    Conv2d::new(pb, &format!("backbone.stage{}.mix", i + 1), c, c, 3, 1, true, Init::FanIn(2f64.sqrt()));
                cin = c;
                (down, mix)
            })
            .collect();
        ToyBackbone { stages, channels: channels.to_vec() }
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    /// Input: `(h*w) x 3` standardized frame.
    pub fn encode<T: Real>(&self, t: &mut Tape<T>, frame: Var, h: usize, w: usize) -> Result<FeaturePyramid> {
        let divisor = 1usize << self.stages.len();
        if h % divisor != 0 || w % divisor != 0 {
            return Err(Error::IndivisibleInput { h, w, divisor });
        }
        if t.shape(frame) != (h * w, 3) {
            return Err(Error::Shape(format!("frame tensor {:?}, expected ({}, 3)", t.shape(frame), h * w)));
        }
        let mut x = Fmap::new(frame, h, w);
        let mut levels = Vec::with_capacity(self.stages.len());
        for (down, mix) in &self.stages {
            let y = down.forward(t, x);
            let y = y.with(t.relu(y.v));
            let z = mix.forward(t, y);
            x = z.with(t.relu(z.v));
            levels.push(x);
        }
        Ok(FeaturePyramid { levels })
    }
}

/// Registry for `encoder.image`.
pub fn image_encoder<T: Real>(key: &str, pb: &mut ParamBuilder<T>, channels: &[usize]) -> Result<ToyBackbone> {
    match key {
        "toy-conv" => Ok(ToyBackbone::new(pb, channels)),
        other => Err(Error::ConfigValue {
            key: "encoder.image".into(),
            value: other.into(),
            reason: "registered encoders: toy-conv".into(),
        }),
    }
}

/// Multi-ratio average pooling, each pooled map resampled back, concatenated and
/// projected to the input width.
#[derive(Clone, Debug)]
pub struct PoolEnhance {
    pub ratios: Vec<usize>,
    pub proj: Linear,
}

impl PoolEnhance {
    /// The projection starts as the mean of the pooled branches.
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, name: &str, channels: usize, ratios: &[usize]) -> Self {
        let k = ratios.len();
        let mut w = vec![0.0; k * channels * channels];
        for b in 0..k {
            for c in 0..channels {
                w[(b * channels + c) * channels + c] = 1.0 / k as f64;
            }
        }
        let proj = Linear::with_init(pb, &format!("{name}.proj"), k * channels, channels, true, Init::Value(w));
        PoolEnhance { ratios: ratios.to_vec(), proj }
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, u: Fmap) -> Fmap {
        let branches: Vec<Var> = self
            .ratios
            .iter()
            .map(|&r| {
                if r == 1 {
                    u.v
                } else {
                    let pooled = resize(t, u, u.hw(), ResampleMode::AvgPool(r));
                    resize(t, pooled, u.hw(), ResampleMode::Bilinear).v
                }
            })
            .collect();
        let cat = if branches.len() == 1 { branches[0] } else { t.concat_cols(&branches) };
        u.with(self.proj.forward(t, cat))
    }
}

/// Resamples a list of maps to the grid of the first, projects each to `out` channels
/// and sums them.
///
/// Equivalent to resample-then-concat-then-linear, since resampling acts on rows and
/// the projection on columns; computing the projection first is cheaper.
#[derive(Clone, Debug)]
pub struct PyramidCollapse {
    pub projs: Vec<Linear>,
    pub bias: ParamId,
}

impl PyramidCollapse {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, name: &str, in_channels: &[usize], out: usize) -> Self {
        let projs = in_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Linear::with_init(pb, &format!("{name}.proj{i}"), c, out, false, Init::FanIn(1.0)))
            .collect();
        let bias = pb.param(&format!("{name}.bias"), 1, out, Init::Zeros);
        PyramidCollapse { projs, bias }
    }

    /// Builds from an explicit concatenated weight `(sum c_i) x out` and bias.
    pub fn from_weights<T: Real>(pb: &mut ParamBuilder<T>, name: &str, in_channels: &[usize], w: &Mat<f64>, b: &[f64]) -> Self {
        let out = w.cols();
        let mut offset = 0;
        let projs = in_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let block: Vec<f64> = w.data()[offset * out..(offset + c) * out].to_vec();
                offset += c;
                Linear::with_init(pb, &format!("{name}.proj{i}"), c, out, false, Init::Value(block))
            })
            .collect();
        let bias = pb.param(&format!("{name}.bias"), 1, out, Init::Value(b.to_vec()));
        PyramidCollapse { projs, bias }
    }

    pub fn out_dim(&self) -> usize {
        self.projs[0].out_dim
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, levels: &[Fmap]) -> Fmap {
        assert_eq!(levels.len(), self.projs.len(), "collapse level count");
        let grid = levels[0].hw();
        let mut acc: Option<Var> = None;
        for (x, proj) in levels.iter().zip(&self.projs) {
            let y = x.with(proj.forward(t, x.v));
            let y = resize(t, y, grid, ResampleMode::Bilinear).v;
            acc = Some(match acc {
                Some(a) => t.add(a, y),
                None => y,
            });
        }
        let b = t.param(self.bias);
        let v = t.add_row(acc.expect("at least one level"), b);
        Fmap { v, batch: levels[0].batch, h: grid.0, w: grid.1 }
    }
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|s| !s.is_empty()).map(|s| s.to_lowercase()).collect()
}

/// FNV-1a over the token bytes, reduced modulo `buckets`.
pub fn token_bucket(token: &str, buckets: usize) -> usize {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in token.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    (h % buckets as u64) as usize
}

pub fn validate_templates(templates: &[String]) -> Result<()> {
    if templates.is_empty() {
        return Err(Error::MalformedTemplate(String::new()));
    }
    for t in templates {
        if t.matches("{}").count() != 1 {
            return Err(Error::MalformedTemplate(t.clone()));
        }
    }
    Ok(())
}

pub fn fill_template(template: &str, name: &str) -> String {
    template.replacen("{}", name, 1)
}

/// Any fixed map from strings to vectors, e.g. a pretrained text model's outputs.
pub trait StringEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Learnable hashed-token embedding table; a string embeds as the mean of its token rows.
#[derive(Clone, Debug)]
pub struct HashTextEncoder {
    pub table: ParamId,
    pub buckets: usize,
    pub dim: usize,
}

impl HashTextEncoder {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, buckets: usize, dim: usize) -> Self {
        let table = pb.param("text.table", buckets, dim, Init::Normal(1.0));
        HashTextEncoder { table, buckets, dim }
    }

    /// Bucket ids of a string.
    pub fn buckets_of(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|tok| token_bucket(tok, self.buckets)).collect()
    }

    /// `N x dim` matrix; row `n` is the mean over templates of the mean token embedding.
    pub fn encode<T: Real>(&self, t: &mut Tape<T>, names: &[String], templates: &[String]) -> Result<Var> {
        validate_templates(templates)?;
        let mut idx = Vec::new();
        let mut weights = Vec::new();
        for name in names {
            let mut row = Vec::new();
            for tpl in templates {
                let ids = self.buckets_of(&fill_template(tpl, name));
                if ids.is_empty() {
                    return Err(Error::InvalidVocabulary(format!("class {name:?} has no tokens")));
                }
                let w = 1.0 / (templates.len() * ids.len()) as f64;
                for id in ids {
                    row.push((idx.len(), w));
                    idx.push(id);
                }
            }
            weights.push(row);
        }
        let mut avg = Mat::<T>::zeros(names.len(), idx.len());
        for (n, row) in weights.iter().enumerate() {
            for &(j, w) in row {
                avg.set(n, j, T::from_f64(w));
            }
        }
        let table = t.param(self.table);
        let tokens = t.gather_rows(table, idx);
        let avg = t.constant(avg);
        Ok(t.matmul(avg, tokens))
    }
}

/// Text encoder selected by `encoder.text`.
#[derive(Clone)]
pub enum TextEncoder {
    ToyHash(HashTextEncoder),
    Frozen(Arc<dyn StringEmbedder>),
}

impl std::fmt::Debug for TextEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TextEncoder::ToyHash(e) => f.debug_tuple("ToyHash").field(e).finish(),
            TextEncoder::Frozen(e) => write!(f, "Frozen(dim={})", e.dim()),
        }
    }
}

impl TextEncoder {
    pub fn from_registry<T: Real>(key: &str, pb: &mut ParamBuilder<T>, buckets: usize, dim: usize) -> Result<Self> {
        match key {
            "toy-hash" => Ok(TextEncoder::ToyHash(HashTextEncoder::new(pb, buckets, dim))),
            other => Err(Error::ConfigValue {
                key: "encoder.text".into(),
                value: other.into(),
                reason: "registered encoders: toy-hash".into(),
            }),
        }
    }

    pub fn encode<T: Real>(&self, t: &mut Tape<T>, names: &[String], templates: &[String]) -> Result<Var> {
        match self {
            TextEncoder::ToyHash(e) => e.encode(t, names, templates),
            TextEncoder::Frozen(e) => {
                validate_templates(templates)?;
                let d = e.dim();
                let mut m = Mat::<T>::zeros(names.len(), d);
                for (n, name) in names.iter().enumerate() {
                    for tpl in templates {
                        let v = e.embed(&fill_template(tpl, name));
                        if v.len() != d {
                            return Err(Error::Shape(format!("embedder returned {} values, expected {d}", v.len())));
                        }
                        for (c, x) in v.iter().enumerate() {
                            let cur = m.get(n, c);
                            m.set(n, c, cur + T::from_f64(x / templates.len() as f64));
                        }
                    }
                }
                Ok(t.constant(m))
            }
        }
    }
}
