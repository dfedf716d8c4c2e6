//! The full pipeline: backbone, pooling enhancement, temporal fusion, random-frame
//! enhancement and text-guided decoding.

use crate::autograd::{Tape, Var};
use crate::clipio::{Normalization, VideoClipSample};
use crate::config::{Config, TextFrames};
use crate::encoders::{image_encoder, FeaturePyramid, PoolEnhance, TextEncoder, ToyBackbone};
use crate::error::{Error, Result};
use crate::nn::Fmap;
use crate::params::{ParamBuilder, ParamStore};
use crate::rfe::Rfe;
use crate::stcf::{AuxHead, Stcf};
use crate::tensor::{Mat, Real};
use crate::vte::{CostVolume, Vte};

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: Config,
    /// Width of the auxiliary head: the number of classes supervised in training.
    pub seen: usize,
    pub backbone: ToyBackbone,
    /// Pooling enhancement per pyramid level (`None` for levels no module reads).
    pub enhance: Vec<Option<PoolEnhance>>,
    pub stcf: Stcf,
    pub rfe: Option<Rfe>,
    pub vte: Vte,
    pub text: TextEncoder,
    pub aux: AuxHead,
}

/// Standardized network inputs for one clip.
#[derive(Clone, Debug)]
pub struct ClipInput<T> {
    /// Clip frames, oldest first, target last; each `(h*w) x 3`.
    pub frames: Vec<Mat<T>>,
    pub random: Option<Mat<T>>,
    pub h: usize,
    pub w: usize,
}

impl<T: Real> ClipInput<T> {
    pub fn from_sample(sample: &VideoClipSample, norm: &Normalization) -> Self {
        ClipInput {
            frames: sample.clip_frames().map(|f| f.to_input(norm)).collect(),
            random: Some(sample.random_frame.to_input(norm)),
            h: sample.h,
            w: sample.w,
        }
    }
}

struct FrameFeatures {
    raw: FeaturePyramid,
    enhanced: Vec<Option<Fmap>>,
}

/// Model outputs for one target frame.
#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    /// `(h*w) x N` logits at input resolution.
    pub logits: Fmap,
    /// Seen-class logits on `O_t`'s grid.
    pub aux: Fmap,
    pub cost: CostVolume,
    pub steps: usize,
}

impl Model {
    /// Registers all parameters in `store`, drawing initial values from `cfg.train.seed`.
    pub fn new<T: Real>(cfg: &Config, seen: usize, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        if seen == 0 {
            return Err(Error::InvalidVocabulary("no seen classes to supervise".into()));
        }
        let m = &cfg.model;
        let levels = m.channels.len();
        let mut pb = ParamBuilder::new(store, cfg.train.seed);
        let backbone = image_encoder(&m.image_encoder, &mut pb, &m.channels)?;
        let first = cfg.stcf.first_level.min(cfg.rfe.first_level);
        let enhance = (1..=levels)
            .map(|l| {
                (l >= first).then(|| PoolEnhance::new(&mut pb, &format!("enhance.level{l}"), m.channels[l - 1], &m.pool_ratios))
            })
            .collect();
        let fused = &m.channels[cfg.stcf.first_level - 1..];
        let stcf = Stcf::new(&mut pb, fused, cfg.stcf.attn_dim, cfg.stcf.conv_kernel, cfg.stcf.raw_affinity, m.embed_dim);
        let rfe = if cfg.rfe.enabled {
            let regions = cfg.rfe.regions.unwrap_or(seen);
            Some(Rfe::new(
                &mut pb,
                &m.channels[cfg.rfe.first_level - 1..],
                m.embed_dim,
                regions,
                cfg.rfe.heads,
                cfg.rfe.residual,
            )?)
        } else {
            None
        };
        let vte = Vte::new(
            &mut pb,
            &m.channels,
            m.embed_dim,
            cfg.vte.heads,
            cfg.vte.text_refine,
            cfg.vte.pos_channels,
            cfg.vte.fusion,
            cfg.vte.head_hidden,
            cfg.vte.up_hidden,
        )?;
        let text = TextEncoder::from_registry(&m.text_encoder, &mut pb, m.text_buckets, m.embed_dim)?;
        let aux = AuxHead::new(&mut pb, m.embed_dim, seen);
        Ok(Model { cfg: cfg.clone(), seen, backbone, enhance, stcf, rfe, vte, text, aux })
    }

    fn encode_frame<T: Real>(&self, t: &mut Tape<T>, x: &Mat<T>, h: usize, w: usize) -> Result<FrameFeatures> {
        let v = t.constant(x.clone());
        let raw = self.backbone.encode(t, v, h, w)?;
        let enhanced = self
            .enhance
            .iter()
            .zip(&raw.levels)
            .map(|(pe, &u)| pe.as_ref().map(|pe| pe.forward(t, u)))
            .collect();
        Ok(FrameFeatures { raw, enhanced })
    }

    /// Runs the model with the clip's last frame as the target.
    pub fn forward<T: Real>(&self, t: &mut Tape<T>, input: &ClipInput<T>, names: &[String]) -> Result<Prediction> {
        let n = input.frames.len();
        Ok(self.forward_targets(t, input, names, &[n - 1])?.remove(0))
    }

    /// Runs the model once per entry of `targets`, each time on the clip prefix that
    /// ends at that frame. Frame features and text embeddings are shared.
    pub fn forward_targets<T: Real>(
        &self,
        t: &mut Tape<T>,
        input: &ClipInput<T>,
        names: &[String],
        targets: &[usize],
    ) -> Result<Vec<Prediction>> {
        if input.frames.is_empty() {
            return Err(Error::EmptyClip);
        }
        if names.is_empty() {
            return Err(Error::InvalidVocabulary("no classes presented".into()));
        }
        let (h, w) = (input.h, input.w);
        let frames: Vec<FrameFeatures> =
            input.frames.iter().map(|x| self.encode_frame(t, x, h, w)).collect::<Result<_>>()?;
        let f_t = self.text.encode(t, names, &self.cfg.model.templates)?;

        let regions = match (&self.rfe, &input.random) {
            (Some(rfe), Some(random)) => {
                let rf = self.encode_frame(t, random, h, w)?;
                let lv: Vec<Fmap> = rf.enhanced[self.cfg.rfe.first_level - 1..].iter().map(|e| e.expect("enhanced")).collect();
                let d = rfe.collapse_random_pyramid(t, &lv);
                Some(rfe.region_pool(t, d.v).l_r)
            }
            (Some(_), None) => return Err(Error::Invalid("random frame enhancement needs a random frame".into())),
            _ => None,
        };

        let dense: Vec<Fmap> = frames.iter().map(|f| self.vte.dense_visual(t, &f.raw.levels)).collect();
        let first = self.cfg.stcf.first_level - 1;
        let mut out = Vec::with_capacity(targets.len());
        for &target in targets {
            if target >= frames.len() {
                return Err(Error::FrameOutOfRange { target, video_len: frames.len() });
            }
            let clip = &frames[..=target];
            let raw: Vec<Vec<Fmap>> = clip.iter().map(|f| f.raw.levels[first..].to_vec()).collect();
            let enh: Vec<Vec<Fmap>> =
                clip.iter().map(|f| f.enhanced[first..].iter().map(|e| e.expect("enhanced")).collect()).collect();
            let fused = self.stcf.fuse_clip(t, &raw, &enh)?;
            let aux = self.aux.auxiliary_logits(t, fused.o_t);
            let o_hat = match (&self.rfe, regions) {
                (Some(rfe), Some(l_r)) => fused.o_t.with(rfe.enhance_target(t, fused.o_t.v, l_r)?),
                _ => fused.o_t,
            };
            let context = match self.cfg.vte.text_frames {
                TextFrames::Target => dense[target].v,
                TextFrames::Clip => mean_vars(t, &dense[..=target].iter().map(|d| d.v).collect::<Vec<_>>()),
            };
            let u1 = clip[target].raw.levels[0];
            let res = self.vte.forward(t, f_t, dense[target], context, u1, o_hat)?;
            let logits = self.vte.upsample_logits(t, res.logits, &input.frames[target], (h, w));
            out.push(Prediction { logits, aux, cost: res.cost, steps: fused.steps });
        }
        Ok(out)
    }
}

fn mean_vars<T: Real>(t: &mut Tape<T>, vs: &[Var]) -> Var {
    if vs.len() == 1 {
        return vs[0];
    }
    let mut acc = vs[0];
    for &v in &vs[1..] {
        acc = t.add(acc, v);
    }
    t.scale(acc, T::one() / T::from_f64(vs.len() as f64))
}
