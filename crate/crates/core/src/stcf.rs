//! Spatial-temporal context fusion.
//!
//! Frames of a clip are fused one at a time, oldest first. At every scale the running
//! past feature `D_past` is attended to by the next frame's features; the attended
//! values become the new `D_past`. After the target frame's step, the per-scale
//! affinities are refined coarse-to-fine and used to read out `O_t`, and the scales
//! are merged into one map at the finest fused resolution.
//!
//! Cost per step and scale is `O((HW)^2 C)` for the affinity plus `O((HW)^2 k^2)` for
//! the aggregation convolution, so the fused levels should stay coarse.

use std::sync::Arc;

use crate::autograd::{Tape, Var};
use crate::encoders::PyramidCollapse;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Fmap, Linear};
use crate::params::{Init, ParamBuilder};
use crate::resample::{ResampleMode, ResamplePlan};
use crate::tensor::{Mat, Real};

/// Query/key/value maps for one scale. Keys and queries go to `attn_dim`; values keep
/// the scale's width so that the attended output can replace `D_past`.
#[derive(Clone, Debug)]
pub struct QkvProjection {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl QkvProjection {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, name: &str, channels: usize, attn_dim: usize) -> Self {
        QkvProjection {
            q: Linear::new(pb, &format!("{name}.q"), channels, attn_dim, true),
            k: Linear::new(pb, &format!("{name}.k"), channels, attn_dim, true),
            v: Linear::with_init(pb, &format!("{name}.v"), channels, channels, true, Init::Identity),
        }
    }

    /// `Q` from the later frame, `K` and `V` from the running past feature.
    pub fn project<T: Real>(&self, t: &mut Tape<T>, u_target: Fmap, d_past: Fmap) -> Result<(Var, Var, Var)> {
        if u_target.hw() != d_past.hw() || t.shape(u_target.v) != t.shape(d_past.v) {
            return Err(Error::Shape(format!(
                "target {:?}{:?} vs past {:?}{:?}",
                u_target.hw(),
                t.shape(u_target.v),
                d_past.hw(),
                t.shape(d_past.v)
            )));
        }
        let q = self.q.forward(t, u_target.v);
        let k = self.k.forward(t, d_past.v);
        let v = self.v.forward(t, d_past.v);
        Ok((q, k, v))
    }
}

/// `A = softmax(Q K^T / sqrt(d))` (or the bare product when `raw`), and `N = A V`.
pub fn pairwise_attention<T: Real>(t: &mut Tape<T>, q: Var, k: Var, v: Var, raw: bool) -> (Var, Var) {
    let d = t.shape(q).1;
    let a = if raw {
        t.matmul_nt(q, k, T::one())
    } else {
        let s = t.matmul_nt(q, k, T::one() / T::from_f64((d as f64).sqrt()));
        t.softmax_rows(s)
    };
    let n = t.matmul(a, v);
    (a, n)
}

/// Query-by-key affinity on one scale's grid (queries and keys share the grid).
#[derive(Clone, Copy, Debug)]
pub struct AffinityMap {
    pub a: Var,
    pub hw: (usize, usize),
}

/// Bilinear resampling of an affinity over both its query grid (rows) and key grid
/// (columns). Scaled by the area ratio so row sums are preserved.
pub fn upsample_affinity<T: Real>(t: &mut Tape<T>, b: Var, from: (usize, usize), to: (usize, usize)) -> Var {
    if from == to {
        return b;
    }
    let plan = Arc::new(ResamplePlan::new(1, from, to, ResampleMode::Bilinear));
    let rows = t.resample(b, plan.clone());
    let cols = t.transpose(rows);
    let both = t.resample(cols, plan);
    let back = t.transpose(both);
    let ratio = (from.0 * from.1) as f64 / (to.0 * to.1) as f64;
    t.scale(back, T::from_f64(ratio))
}

/// Coarse-to-fine refinement: `B^L = A^L`, `B^l = norm(relu(conv(up(B^{l+1}) + A^l)) + 1e-12)`.
///
/// The convolution runs over the query grid with one channel, shared across keys, so
/// each key's response map is smoothed spatially. In raw mode the rectification and
/// row normalization are skipped.
#[derive(Clone, Debug)]
pub struct AffinityAggregator {
    /// One per transition, indexed by the finer scale (`convs[i]` produces `B` at scale `i`).
    pub convs: Vec<Conv2d>,
    pub raw: bool,
}

impl AffinityAggregator {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, name: &str, scales: usize, kernel: usize, raw: bool) -> Self {
        let convs = (0..scales.saturating_sub(1))
            .map(|i| {
                Conv2d::new(pb, &format!("{name}.conv{i}"), 1, 1, kernel, 1, false, Conv2d::identity_init(1, 1, kernel))
            })
            .collect();
        AffinityAggregator { convs, raw }
    }

    /// Maps are ordered shallow to deep; returns `B` in the same order.
    pub fn aggregate<T: Real>(&self, t: &mut Tape<T>, maps: &[AffinityMap]) -> Result<Vec<Var>> {
        if maps.is_empty() || maps.len() != self.convs.len() + 1 {
            return Err(Error::Shape(format!("{} affinity scales for an aggregator of {}", maps.len(), self.convs.len() + 1)));
        }
        let last = maps.len() - 1;
        let mut out = vec![maps[last].a; maps.len()];
        for l in (0..last).rev() {
            let (hw, prev_hw) = (maps[l].hw, maps[l + 1].hw);
            let up = upsample_affinity(t, out[l + 1], prev_hw, hw);
            let sum = t.add(up, maps[l].a);
            let p = hw.0 * hw.1;
            // Rows are queries; the conv wants one image per key over the query grid.
            let per_key = t.transpose(sum);
            let flat = t.reshape(per_key, p * p, 1);
            let y = self.convs[l].forward(t, Fmap::batched(flat, p, hw.0, hw.1));
            let y = t.reshape(y.v, p, p);
            let y = t.transpose(y);
            out[l] = if self.raw {
                y
            } else {
                // The floor turns a fully rectified row into a uniform one.
                let r = t.relu(y);
                let floor = t.constant(Mat::from_vec(1, p, vec![T::from_f64(1e-12); p]));
                let r = t.add_row(r, floor);
                t.normalize_row_sum(r, T::from_f64(1e-12))
            };
        }
        Ok(out)
    }
}

/// Result of fusing one clip.
#[derive(Clone, Debug)]
pub struct FusedFrameFeature {
    /// Fused target feature at the finest fused scale, `embed_dim` channels.
    pub o_t: Fmap,
    /// Per-scale `O_t^l`, shallow to deep.
    pub per_scale: Vec<Fmap>,
    /// Refined affinities of the final step (empty for a one-frame clip).
    pub affinities: Vec<Var>,
    /// Attention steps executed.
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct Stcf {
    pub scales: Vec<QkvProjection>,
    pub aggregator: AffinityAggregator,
    pub collapse: PyramidCollapse,
    pub raw: bool,
}

impl Stcf {
    /// `channels` lists the widths of the fused scales, shallow to deep.
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<T>,
        channels: &[usize],
        attn_dim: usize,
        kernel: usize,
        raw: bool,
        out_dim: usize,
    ) -> Self {
        let scales =
            channels.iter().enumerate().map(|(i, &c)| QkvProjection::new(pb, &format!("stcf.scale{i}"), c, attn_dim)).collect();
        let aggregator = AffinityAggregator::new(pb, "stcf.agg", channels.len(), kernel, raw);
        let collapse = PyramidCollapse::new(pb, "stcf.collapse", channels, out_dim);
        Stcf { scales, aggregator, collapse, raw }
    }

    /// `raw[f][s]` and `enhanced[f][s]` hold frame `f`'s backbone and pooled features at
    /// fused scale `s`; frames are ordered oldest first, the target last.
    pub fn fuse_clip<T: Real>(&self, t: &mut Tape<T>, raw: &[Vec<Fmap>], enhanced: &[Vec<Fmap>]) -> Result<FusedFrameFeature> {
        if raw.is_empty() || raw.len() != enhanced.len() {
            return Err(Error::EmptyClip);
        }
        let ns = self.scales.len();
        if raw.iter().chain(enhanced).any(|f| f.len() != ns) {
            return Err(Error::Shape(format!("every frame needs {ns} fused scales")));
        }
        let mut d_past: Vec<Fmap> = enhanced[0].clone();
        let mut steps = 0;
        let mut last: Option<(Vec<AffinityMap>, Vec<Var>)> = None;
        for frame in &raw[1..] {
            let mut maps = Vec::with_capacity(ns);
            let mut values = Vec::with_capacity(ns);
            for s in 0..ns {
                let (q, k, v) = self.scales[s].project(t, frame[s], d_past[s])?;
                let (a, n) = pairwise_attention(t, q, k, v, self.raw);
                maps.push(AffinityMap { a, hw: frame[s].hw() });
                values.push(v);
                d_past[s] = d_past[s].with(n);
            }
            steps += 1;
            last = Some((maps, values));
        }
        let (per_scale, affinities) = match last {
            None => (enhanced[0].clone(), Vec::new()),
            Some((maps, values)) => {
                let b = self.aggregator.aggregate(t, &maps)?;
                let outs = (0..ns).map(|s| d_past[s].with(t.matmul(b[s], values[s]))).collect();
                (outs, b)
            }
        };
        let o_t = self.collapse.forward(t, &per_scale);
        Ok(FusedFrameFeature { o_t, per_scale, affinities, steps })
    }
}

/// 1x1 head from `O_t` to seen-class logits, used only by the auxiliary loss.
#[derive(Clone, Debug)]
pub struct AuxHead {
    pub proj: Linear,
}

impl AuxHead {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, in_dim: usize, seen: usize) -> Self {
        AuxHead { proj: Linear::new(pb, "aux", in_dim, seen, true) }
    }

    pub fn auxiliary_logits<T: Real>(&self, t: &mut Tape<T>, o_t: Fmap) -> Fmap {
        o_t.with(self.proj.forward(t, o_t.v))
    }
}
