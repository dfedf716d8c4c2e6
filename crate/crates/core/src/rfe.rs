//! Random frame enhancement: region context from a distant frame of the same video,
//! injected into the fused target feature by cross-attention.
//!
//! Region pooling costs `O(HW K C)` and the cross-attention `O(HW K C)`; with `K` small
//! this is negligible next to the temporal fusion.

use crate::autograd::{Tape, Var};
use crate::encoders::PyramidCollapse;
use crate::error::{Error, Result};
use crate::nn::{multi_head_attention, Fmap, Linear};
use crate::params::ParamBuilder;
use crate::tensor::Real;

/// Region representations `L_r` (`K x C`) and the pixel weights that produced them
/// (`K x HW`, each row a distribution over pixels).
#[derive(Clone, Copy, Debug)]
pub struct RegionContext {
    pub l_r: Var,
    pub weights: Var,
}

#[derive(Clone, Debug)]
pub struct Rfe {
    pub collapse: PyramidCollapse,
    pub region: Linear,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub heads: usize,
    pub residual: bool,
}

impl Rfe {
    /// `channels` are the widths of the collapsed pyramid levels, finest first.
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<T>,
        channels: &[usize],
        dim: usize,
        regions: usize,
        heads: usize,
        residual: bool,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::HeadsNotDivisible { channels: dim, heads });
        }
        Ok(Rfe {
            collapse: PyramidCollapse::new(pb, "rfe.collapse", channels, dim),
            region: Linear::new(pb, "rfe.region", dim, regions, true),
            q: Linear::new(pb, "rfe.q", dim, dim, true),
            k: Linear::new(pb, "rfe.k", dim, dim, true),
            v: Linear::new(pb, "rfe.v", dim, dim, true),
            heads,
            residual,
        })
    }

    pub fn regions(&self) -> usize {
        self.region.out_dim
    }

    /// All levels resampled to the first level's grid, concatenated and projected.
    pub fn collapse_random_pyramid<T: Real>(&self, t: &mut Tape<T>, levels: &[Fmap]) -> Fmap {
        self.collapse.forward(t, levels)
    }

    pub fn region_pool<T: Real>(&self, t: &mut Tape<T>, d_random: Var) -> RegionContext {
        region_pool(t, &self.region, d_random)
    }

    /// `O_t + MHA(O_t, L_r, L_r)`, or just the attention when the residual is off.
    pub fn enhance_target<T: Real>(&self, t: &mut Tape<T>, o_t: Var, l_r: Var) -> Result<Var> {
        let (c, cr) = (t.shape(o_t).1, t.shape(l_r).1);
        if c != cr {
            return Err(Error::Shape(format!("O_t has {c} channels, regions {cr}")));
        }
        let q = self.q.forward(t, o_t);
        let k = self.k.forward(t, l_r);
        let v = self.v.forward(t, l_r);
        let (attn, _) = multi_head_attention(t, q, k, v, self.heads);
        Ok(if self.residual { t.add(o_t, attn) } else { attn })
    }
}

/// Per-pixel region logits, softmax over pixels per region, and weighted feature means.
pub fn region_pool<T: Real>(t: &mut Tape<T>, conv: &Linear, d_random: Var) -> RegionContext {
    let logits = conv.forward(t, d_random);
    let per_region = t.transpose(logits);
    let weights = t.softmax_rows(per_region);
    let l_r = t.matmul(weights, d_random);
    RegionContext { l_r, weights }
}
