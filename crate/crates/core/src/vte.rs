//! Video text encoding and cost-volume decoding.
//!
//! Everything after the cosine cost volume treats each class slice as its own
//! one-channel image with shared weights, so the number of presented classes is free
//! and class slices never interact until the final argmax.
//!
//! With `N` classes on an `H'W'` grid the cost volume and its refinement are
//! `O(N H'W' C)`; text refinement is `O(N H'W' C)` as well.

use crate::autograd::{ConvGeom, Tape, Var};
use crate::config::{Fusion, TextRefine};
use crate::encoders::PyramidCollapse;
use crate::error::{Error, Result};
use crate::nn::{multi_head_attention, resize, Conv2d, Fmap, Linear};
use crate::params::{Init, ParamBuilder, ParamId};
use crate::resample::ResampleMode;
use crate::tensor::{Mat, Real};

pub const COSINE_EPS: f64 = 1e-8;

/// Text features refined by attention over visual tokens.
#[derive(Clone, Debug)]
pub struct TextRefiner {
    pub mode: TextRefine,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// Zero-initialized, so refinement starts as the identity.
    pub out: Linear,
    pub ffn: Option<(Linear, Linear)>,
    pub heads: usize,
}

impl TextRefiner {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, dim: usize, heads: usize, mode: TextRefine) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::HeadsNotDivisible { channels: dim, heads });
        }
        let ffn = (mode == TextRefine::MhsaFfn).then(|| {
            (
                Linear::new(pb, "vte.text.ffn1", dim, 2 * dim, true),
                Linear::with_init(pb, "vte.text.ffn2", 2 * dim, dim, true, Init::Zeros),
            )
        });
        Ok(TextRefiner {
            mode,
            q: Linear::new(pb, "vte.text.q", dim, dim, true),
            k: Linear::new(pb, "vte.text.k", dim, dim, true),
            v: Linear::new(pb, "vte.text.v", dim, dim, true),
            out: Linear::with_init(pb, "vte.text.out", dim, dim, true, Init::Zeros),
            ffn,
            heads,
        })
    }

    /// `F_T + out(MHA(F_T, F_V, F_V))`, then an optional residual feed-forward block.
    pub fn refine_text<T: Real>(&self, t: &mut Tape<T>, f_t: Var, f_v: Var) -> Result<Var> {
        let (ct, cv) = (t.shape(f_t).1, t.shape(f_v).1);
        if ct != cv {
            return Err(Error::Shape(format!("text has {ct} channels, visual {cv}")));
        }
        if self.mode == TextRefine::Off {
            return Ok(f_t);
        }
        let q = self.q.forward(t, f_t);
        let k = self.k.forward(t, f_v);
        let v = self.v.forward(t, f_v);
        let (attn, _) = multi_head_attention(t, q, k, v, self.heads);
        let attn = self.out.forward(t, attn);
        let mut x = t.add(f_t, attn);
        if let Some((l1, l2)) = &self.ffn {
            let h = l1.forward(t, x);
            let h = t.relu(h);
            let h = l2.forward(t, h);
            x = t.add(x, h);
        }
        Ok(x)
    }
}

/// Raw cosine similarities, `H'W' x N` (pixels by classes).
#[derive(Clone, Copy, Debug)]
pub struct CostVolume {
    pub x: Var,
    pub classes: usize,
    pub h: usize,
    pub w: usize,
    /// Text rows plus pixels whose norm fell below the guard.
    pub zero_norm: usize,
}

impl CostVolume {
    /// The volume as `N` one-channel images, `(N*H'*W') x 1`.
    pub fn slices<T: Real>(&self, t: &mut Tape<T>) -> Fmap {
        let per_class = t.transpose(self.x);
        let flat = t.reshape(per_class, self.classes * self.h * self.w, 1);
        Fmap::batched(flat, self.classes, self.h, self.w)
    }
}

fn count_small_rows<T: Real>(t: &Tape<T>, v: Var) -> usize {
    let m = t.value(v);
    (0..m.rows()).filter(|&r| m.row(r).iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt() <= COSINE_EPS).count()
}

/// `X[p, n] = cos(F_V[p], F_T[n])`; vectors with norm at most `1e-8` give similarity 0.
pub fn build_cost_volume<T: Real>(t: &mut Tape<T>, f_t: Var, f_v: Fmap) -> Result<CostVolume> {
    let (ct, cv) = (t.shape(f_t).1, t.shape(f_v.v).1);
    if ct != cv {
        return Err(Error::Shape(format!("text has {ct} channels, visual {cv}")));
    }
    let zero_norm = count_small_rows(t, f_t) + count_small_rows(t, f_v.v);
    let eps = T::from_f64(COSINE_EPS);
    let tn = t.l2_normalize_rows(f_t, eps);
    let vn = t.l2_normalize_rows(f_v.v, eps);
    let x = t.matmul_nt(vn, tn, T::one());
    // Rounding can land a hair outside [-1, 1].
    let x = t.clamp(x, -T::one(), T::one());
    Ok(CostVolume { x, classes: t.shape(f_t).0, h: f_v.h, w: f_v.w, zero_norm })
}

/// One shared convolution applied to every class slice.
pub fn refine_cost_volume<T: Real>(t: &mut Tape<T>, conv: &Conv2d, slices: Fmap) -> Fmap {
    conv.forward(t, slices)
}

/// `Linear(concat[slice, U^1])` per class slice. The weight's first row multiplies the
/// slice value, the remaining rows the positional channels.
#[derive(Clone, Debug)]
pub struct PositionFusion {
    pub proj: Linear,
}

impl PositionFusion {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, pos_in: usize, out: usize) -> Self {
        PositionFusion { proj: Linear::new(pb, "vte.pos", 1 + pos_in, out, true) }
    }

    /// `slices`: `(N*H'*W') x 1`; `u1` is resampled to the slice grid.
    pub fn fuse_position<T: Real>(&self, t: &mut Tape<T>, slices: Fmap, u1: Fmap) -> Fmap {
        let u1 = resize(t, u1, slices.hw(), ResampleMode::Bilinear);
        let c1 = t.shape(u1.v).1;
        let w = t.param(self.proj.w);
        let w_slice = t.slice_rows(w, 0, 1);
        let w_pos = t.slice_rows(w, 1, c1);
        // Linear over the concatenation, split by input block.
        let a = t.matmul(slices.v, w_slice);
        let p = t.matmul(u1.v, w_pos);
        let mut y = t.add_tiled(a, p);
        if let Some(b) = self.proj.b {
            let b = t.param(b);
            y = t.add_row(y, b);
        }
        slices.with(y)
    }
}

/// Per-class head on `X̂` and the shared target feature `Ô_t`.
///
/// `concat`: a 3x3 convolution over `[X̂_n, Ô_t]` (stored as the two input blocks of the
/// kernel), ReLU, then a 1x1 convolution to one logit.
/// `add`: `X̂_n` is projected to `Ô_t`'s width and added before the same kind of head.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub fusion: Fusion,
    /// Concat: kernel block reading `X̂` (`9P x hidden`). Add: projection `P x C`.
    pub wx: ParamId,
    /// Kernel block reading `Ô_t` (`9C x hidden`).
    pub wo: ParamId,
    pub b_hidden: ParamId,
    /// Add mode only: projection bias.
    pub b_proj: Option<ParamId>,
    pub out: Linear,
    pub p: usize,
    pub c: usize,
    pub hidden: usize,
}

const K: usize = 3;

impl Decoder {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, fusion: Fusion, p: usize, c: usize, hidden: usize) -> Self {
        let gain = 2f64.sqrt();
        let (wx, b_proj) = match fusion {
            Fusion::Concat => {
                let fan = (K * K * (p + c)) as f64;
                (pb.param("vte.decode.wx", K * K * p, hidden, Init::Normal(gain / fan.sqrt())), None)
            }
            Fusion::Add => (
                pb.param("vte.decode.proj", p, c, Init::FanIn(1.0)),
                Some(pb.param("vte.decode.proj_bias", 1, c, Init::Zeros)),
            ),
        };
        let fan_o = match fusion {
            Fusion::Concat => (K * K * (p + c)) as f64,
            Fusion::Add => (K * K * c) as f64,
        };
        let wo = pb.param("vte.decode.wo", K * K * c, hidden, Init::Normal(gain / fan_o.sqrt()));
        let b_hidden = pb.param("vte.decode.bias", 1, hidden, Init::Zeros);
        let out = Linear::new(pb, "vte.decode.out", hidden, 1, true);
        Decoder { fusion, wx, wo, b_hidden, b_proj, out, p, c, hidden }
    }

    /// `x_hat`: `N` slices of `P` channels. `o_hat`: one map of `C` channels, resampled to
    /// the slice grid. Returns logits `H'W' x N`.
    pub fn decode<T: Real>(&self, t: &mut Tape<T>, x_hat: Fmap, o_hat: Fmap) -> Fmap {
        let n = x_hat.batch;
        let (h, w) = x_hat.hw();
        let o = resize(t, o_hat, (h, w), ResampleMode::Bilinear);
        let geom = |batch, c| ConvGeom { batch, h, w, c, k: K, stride: 1, pad: K / 2 };
        let wo = t.param(self.wo);
        let (x_part, o_in) = match self.fusion {
            Fusion::Concat => {
                let cols = t.im2col(x_hat.v, geom(n, self.p));
                let wx = t.param(self.wx);
                (t.matmul(cols, wx), o.v)
            }
            Fusion::Add => {
                // conv(proj(x) + b + o) = conv(proj(x)) + conv(o + b): fold the projection
                // into each kernel tap so the wide sum is never materialized.
                let proj = t.param(self.wx);
                let taps: Vec<Var> = (0..K * K)
                    .map(|k| {
                        let wk = t.slice_rows(wo, k * self.c, self.c);
                        t.matmul(proj, wk)
                    })
                    .collect();
                let composite = t.concat_rows(&taps);
                let cols = t.im2col(x_hat.v, geom(n, self.p));
                let b = t.param(self.b_proj.expect("add mode has a projection bias"));
                (t.matmul(cols, composite), t.add_row(o.v, b))
            }
        };
        let o_cols = t.im2col(o_in, geom(1, self.c));
        let o_part = t.matmul(o_cols, wo);
        let hsum = t.add_tiled(x_part, o_part);
        let b = t.param(self.b_hidden);
        let hsum = t.add_row(hsum, b);
        let hid = t.relu(hsum);
        let logit = self.out.forward(t, hid);
        let per_class = t.reshape(logit, n, h * w);
        Fmap::new(t.transpose(per_class), h, w)
    }
}

/// Class-agnostic logit upsampling guided by the input frame.
///
/// Each class's bilinearly upsampled logit map goes through a 3x3 convolution over
/// `[logit_n, image]`, ReLU and a 1x1 convolution, added back as a residual. The image
/// block is shared by all classes and computed once. The output layer starts at zero,
/// so the module starts as plain bilinear upsampling.
#[derive(Clone, Debug)]
pub struct GuidedUpsample {
    /// Kernel block reading the logit slice (`9 x hidden`).
    pub wl: ParamId,
    /// Kernel block reading the image (`27 x hidden`).
    pub wi: ParamId,
    pub bias: ParamId,
    pub out: Linear,
}

impl GuidedUpsample {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, hidden: usize) -> Self {
        let std = (2.0 / (K * K * 4) as f64).sqrt();
        GuidedUpsample {
            wl: pb.param("vte.up.wl", K * K, hidden, Init::Normal(std)),
            wi: pb.param("vte.up.wi", K * K * 3, hidden, Init::Normal(std)),
            bias: pb.param("vte.up.bias", 1, hidden, Init::Zeros),
            out: Linear::with_init(pb, "vte.up.out", hidden, 1, true, Init::Zeros),
        }
    }

    /// `logits`: `H'W' x N`; `image`: `(h*w) x 3`. Returns `(h*w) x N`.
    pub fn forward<T: Real>(&self, t: &mut Tape<T>, logits: Fmap, image: Var, hw: (usize, usize)) -> Fmap {
        let up = resize(t, logits, hw, ResampleMode::Bilinear);
        let n = t.shape(up.v).1;
        let (h, w) = hw;
        let geom = |batch, c| ConvGeom { batch, h, w, c, k: K, stride: 1, pad: K / 2 };
        let per_class = t.transpose(up.v);
        let slices = t.reshape(per_class, n * h * w, 1);
        let lc = t.im2col(slices, geom(n, 1));
        let wl = t.param(self.wl);
        let l_part = t.matmul(lc, wl);
        let ic = t.im2col(image, geom(1, 3));
        let wi = t.param(self.wi);
        let i_part = t.matmul(ic, wi);
        let hsum = t.add_tiled(l_part, i_part);
        let b = t.param(self.bias);
        let hsum = t.add_row(hsum, b);
        let hid = t.relu(hsum);
        let delta = self.out.forward(t, hid);
        let delta = t.reshape(delta, n, h * w);
        let delta = t.transpose(delta);
        up.with(t.add(up.v, delta))
    }
}

/// Dense visual features `F_V`, refinement and decoding.
#[derive(Clone, Debug)]
pub struct Vte {
    pub visual: PyramidCollapse,
    pub text: TextRefiner,
    pub cost_conv: Conv2d,
    pub position: PositionFusion,
    pub decoder: Decoder,
    pub upsample: Option<GuidedUpsample>,
}

/// Output of [`Vte::forward`].
#[derive(Clone, Copy, Debug)]
pub struct VteOutput {
    pub cost: CostVolume,
    /// `H'W' x N` logits on the cost-volume grid.
    pub logits: Fmap,
}

impl Vte {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<T>,
        level_channels: &[usize],
        dim: usize,
        heads: usize,
        refine: TextRefine,
        pos_channels: usize,
        fusion: Fusion,
        hidden: usize,
        up_hidden: usize,
    ) -> Result<Self> {
        Ok(Vte {
            visual: PyramidCollapse::new(pb, "vte.visual", level_channels, dim),
            text: TextRefiner::new(pb, dim, heads, refine)?,
            cost_conv: Conv2d::new(pb, "vte.cost", 1, 1, 3, 1, true, Conv2d::identity_init(1, 1, 3)),
            position: PositionFusion::new(pb, level_channels[0], pos_channels),
            decoder: Decoder::new(pb, fusion, pos_channels, dim, hidden),
            upsample: (up_hidden > 0).then(|| GuidedUpsample::new(pb, up_hidden)),
        })
    }

    /// Logits on the cost-volume grid to the input grid; `image` is the normalized target frame.
    pub fn upsample_logits<T: Real>(&self, t: &mut Tape<T>, logits: Fmap, image: &Mat<T>, hw: (usize, usize)) -> Fmap {
        match &self.upsample {
            Some(g) => {
                let img = t.constant(image.clone());
                g.forward(t, logits, img, hw)
            }
            None => resize(t, logits, hw, ResampleMode::Bilinear),
        }
    }

    /// Dense visual feature of one frame from all its pyramid levels.
    pub fn dense_visual<T: Real>(&self, t: &mut Tape<T>, levels: &[Fmap]) -> Fmap {
        self.visual.forward(t, levels)
    }

    /// `f_v_target`: the target's `F_V`; `f_v_context`: the visual tokens for text
    /// refinement; `u1`: the target's shallowest backbone level; `o_hat`: `Ô_t`.
    pub fn forward<T: Real>(
        &self,
        t: &mut Tape<T>,
        f_t: Var,
        f_v_target: Fmap,
        f_v_context: Var,
        u1: Fmap,
        o_hat: Fmap,
    ) -> Result<VteOutput> {
        let f_bar = self.text.refine_text(t, f_t, f_v_context)?;
        let cost = build_cost_volume(t, f_bar, f_v_target)?;
        let slices = cost.slices(t);
        let refined = refine_cost_volume(t, &self.cost_conv, slices);
        let logits = self.decode_factored(t, refined, u1, o_hat);
        Ok(VteOutput { cost, logits })
    }

    /// `decode(fuse_position(refined, u1), o_hat)` without materializing `X̂`.
    ///
    /// `X̂_n = X̃_n w_0 + S` with `S` shared by all classes, and everything up to the
    /// head's ReLU is linear, so the head's first layer splits into a one-channel 3x3
    /// convolution of `X̃_n` with per-tap folded weights plus a shared map computed once.
    /// Zero padding distributes over the split, so the result is exact.
    pub fn decode_factored<T: Real>(&self, t: &mut Tape<T>, refined: Fmap, u1: Fmap, o_hat: Fmap) -> Fmap {
        let dec = &self.decoder;
        let n = refined.batch;
        let (h, w) = refined.hw();
        let geom = |batch, c| ConvGeom { batch, h, w, c, k: K, stride: 1, pad: K / 2 };
        let u1 = resize(t, u1, (h, w), ResampleMode::Bilinear);
        let c1 = t.shape(u1.v).1;
        let pw = t.param(self.position.proj.w);
        let w0 = t.slice_rows(pw, 0, 1);
        let w1 = t.slice_rows(pw, 1, c1);
        let mut pos = t.matmul(u1.v, w1);
        if let Some(b) = self.position.proj.b {
            let b = t.param(b);
            pos = t.add_row(pos, b);
        }
        let o = resize(t, o_hat, (h, w), ResampleMode::Bilinear).v;
        let wo = t.param(dec.wo);
        let (kx, shared) = match dec.fusion {
            Fusion::Concat => {
                let wx = t.param(dec.wx);
                let taps: Vec<Var> = (0..K * K)
                    .map(|k| {
                        let wk = t.slice_rows(wx, k * dec.p, dec.p);
                        t.matmul(w0, wk)
                    })
                    .collect();
                let kx = t.concat_rows(&taps);
                let pc = t.im2col(pos, geom(1, dec.p));
                let a = t.matmul(pc, wx);
                let oc = t.im2col(o, geom(1, dec.c));
                let b = t.matmul(oc, wo);
                (kx, t.add(a, b))
            }
            Fusion::Add => {
                let proj = t.param(dec.wx);
                let wp = t.matmul(w0, proj);
                let taps: Vec<Var> = (0..K * K)
                    .map(|k| {
                        let wk = t.slice_rows(wo, k * dec.c, dec.c);
                        t.matmul(wp, wk)
                    })
                    .collect();
                let kx = t.concat_rows(&taps);
                let s = t.matmul(pos, proj);
                let bp = t.param(dec.b_proj.expect("add mode has a projection bias"));
                let s = t.add_row(s, bp);
                let s = t.add(s, o);
                let sc = t.im2col(s, geom(1, dec.c));
                (kx, t.matmul(sc, wo))
            }
        };
        let xc = t.im2col(refined.v, geom(n, 1));
        let x_part = t.matmul(xc, kx);
        let hsum = t.add_tiled(x_part, shared);
        let b = t.param(dec.b_hidden);
        let hsum = t.add_row(hsum, b);
        let hid = t.relu(hsum);
        let logit = dec.out.forward(t, hid);
        let per_class = t.reshape(logit, n, h * w);
        Fmap::new(t.transpose(per_class), h, w)
    }
}

/// Per-pixel argmax over classes; ties go to the lowest index.
pub fn argmax_rows<T: Real>(logits: &crate::tensor::Mat<T>) -> Vec<u8> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}
