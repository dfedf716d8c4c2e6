//! Layer building blocks recorded on an autograd [`Tape`].

use std::sync::Arc;

use crate::autograd::{ConvGeom, Tape, Var};
use crate::params::{Init, ParamBuilder, ParamId};
use crate::resample::{ResampleMode, ResamplePlan};
use crate::tensor::Real;

/// A feature map stored as `(batch * h * w) x c`.
#[derive(Clone, Copy, Debug)]
pub struct Fmap {
    pub v: Var,
    pub batch: usize,
    pub h: usize,
    pub w: usize,
}

impl Fmap {
    pub fn new(v: Var, h: usize, w: usize) -> Self {
        Fmap { v, batch: 1, h, w }
    }

    pub fn batched(v: Var, batch: usize, h: usize, w: usize) -> Self {
        Fmap { v, batch, h, w }
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn channels<T: Real>(&self, t: &Tape<T>) -> usize {
        t.shape(self.v).1
    }

    pub fn with(&self, v: Var) -> Fmap {
        Fmap { v, ..*self }
    }
}

/// Resamples a feature map to a new grid; identity when the grid already matches.
pub fn resize<T: Real>(t: &mut Tape<T>, x: Fmap, hw: (usize, usize), mode: ResampleMode) -> Fmap {
    if x.hw() == hw && !matches!(mode, ResampleMode::AvgPool(r) if r > 1) {
        return x;
    }
    let plan = Arc::new(ResamplePlan::new(x.batch, x.hw(), hw, mode));
    let out_hw = plan.out_hw;
    let v = t.resample(x.v, plan);
    Fmap { v, batch: x.batch, h: out_hw.0, w: out_hw.1 }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self::with_init(pb, name, in_dim, out_dim, bias, Init::FanIn(1.0))
    }

    pub fn with_init<T: Real>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let w = pb.param(&format!("{name}.weight"), in_dim, out_dim, init);
        let b = bias.then(|| pb.param(&format!("{name}.bias"), 1, out_dim, Init::Zeros));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, x: Var) -> Var {
        let w = t.param(self.w);
        let y = t.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = t.param(b);
                t.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub k: usize,
    pub stride: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        assert!(k % 2 == 1, "odd kernels only");
        let w = pb.param(&format!("{name}.weight"), k * k * cin, cout, init);
        let b = bias.then(|| pb.param(&format!("{name}.bias"), 1, cout, Init::Zeros));
        Conv2d { w, b, k, stride, cin, cout }
    }

    /// Kernel weights with 1 at the centre tap of each input/output channel pair.
    pub fn identity_init(cin: usize, cout: usize, k: usize) -> Init {
        let mut v = vec![0.0; k * k * cin * cout];
        let centre = (k / 2) * k + k / 2;
        for c in 0..cin.min(cout) {
            v[(centre * cin + c) * cout + c] = 1.0;
        }
        Init::Value(v)
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, x: Fmap) -> Fmap {
        let cols = if self.k == 1 && self.stride == 1 {
            x.v
        } else {
            t.im2col(
                x.v,
                ConvGeom { batch: x.batch, h: x.h, w: x.w, c: self.cin, k: self.k, stride: self.stride, pad: self.k / 2 },
            )
        };
        let (ho, wo) = if self.k == 1 && self.stride == 1 {
            (x.h, x.w)
        } else {
            ConvGeom { batch: x.batch, h: x.h, w: x.w, c: self.cin, k: self.k, stride: self.stride, pad: self.k / 2 }
                .out_hw()
        };
        let w = t.param(self.w);
        let mut y = t.matmul(cols, w);
        if let Some(b) = self.b {
            let b = t.param(b);
            y = t.add_row(y, b);
        }
        Fmap { v: y, batch: x.batch, h: ho, w: wo }
    }
}

/// Scaled dot-product attention split over `heads` column groups.
///
/// Returns the concatenated head outputs and the per-head attention matrices.
pub fn multi_head_attention<T: Real>(
    t: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> (Var, Vec<Var>) {
    let dq = t.shape(q).1;
    let dv = t.shape(v).1;
    assert_eq!(dq, t.shape(k).1, "query/key width mismatch");
    assert!(heads >= 1 && dq % heads == 0 && dv % heads == 0, "width not divisible by heads");
    let (hq, hv) = (dq / heads, dv / heads);
    let alpha = T::one() / T::from_f64((hq as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (t.slice_cols(q, h * hq, hq), t.slice_cols(k, h * hq, hq), t.slice_cols(v, h * hv, hv))
        };
        let scores = t.matmul_nt(qh, kh, alpha);
        let a = t.softmax_rows(scores);
        outs.push(t.matmul(a, vh));
        maps.push(a);
    }
    let out = if heads == 1 { outs[0] } else { t.concat_cols(&outs) };
    (out, maps)
}
