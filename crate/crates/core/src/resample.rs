//! Separable spatial resampling (bilinear, average pooling, nearest) over feature maps
//! laid out as `(batch * h * w) x channels`.

use crate::tensor::{Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleMode {
    /// Pixel-centre bilinear interpolation with edge clamping.
    Bilinear,
    /// Non-overlapping `r x r` average pooling; output size is `ceil(in / r)`.
    AvgPool(usize),
    /// Pixel-centre nearest neighbour.
    Nearest,
}

type Taps = Vec<Vec<(usize, f64)>>;

/// A precomputed linear map from an `in_h x in_w` grid to an `out_h x out_w` grid.
#[derive(Clone, Debug)]
pub struct ResamplePlan {
    pub batch: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    ytaps: Taps,
    xtaps: Taps,
}

fn bilinear_taps(n_in: usize, n_out: usize) -> Taps {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let w1 = src - i0 as f64;
            if i1 == i0 || w1 == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - w1), (i1, w1)]
            }
        })
        .collect()
}

fn pool_taps(n_in: usize, r: usize) -> Taps {
    let n_out = n_in.div_ceil(r);
    (0..n_out)
        .map(|o| {
            let lo = o * r;
            let hi = ((o + 1) * r).min(n_in);
            let w = 1.0 / (hi - lo) as f64;
            (lo..hi).map(|i| (i, w)).collect()
        })
        .collect()
}

fn nearest_taps(n_in: usize, n_out: usize) -> Taps {
    (0..n_out)
        .map(|d| {
            let src = (((d as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1);
            vec![(src, 1.0)]
        })
        .collect()
}

impl ResamplePlan {
    pub fn new(batch: usize, in_hw: (usize, usize), out_hw: (usize, usize), mode: ResampleMode) -> Self {
        assert!(in_hw.0 > 0 && in_hw.1 > 0, "empty input grid");
        let (ytaps, xtaps, out_hw) = match mode {
            ResampleMode::Bilinear => {
                (bilinear_taps(in_hw.0, out_hw.0), bilinear_taps(in_hw.1, out_hw.1), out_hw)
            }
            ResampleMode::Nearest => (nearest_taps(in_hw.0, out_hw.0), nearest_taps(in_hw.1, out_hw.1), out_hw),
            ResampleMode::AvgPool(r) => {
                assert!(r >= 1, "pool ratio must be >= 1");
                let yt = pool_taps(in_hw.0, r);
                let xt = pool_taps(in_hw.1, r);
                let hw = (yt.len(), xt.len());
                (yt, xt, hw)
            }
        };
        ResamplePlan { batch, in_hw, out_hw, ytaps, xtaps }
    }

    pub fn is_identity(&self) -> bool {
        self.in_hw == self.out_hw
            && self.ytaps.iter().enumerate().all(|(i, t)| t.len() == 1 && t[0] == (i, 1.0))
            && self.xtaps.iter().enumerate().all(|(i, t)| t.len() == 1 && t[0] == (i, 1.0))
    }

    pub fn in_rows(&self) -> usize {
        self.batch * self.in_hw.0 * self.in_hw.1
    }

    pub fn out_rows(&self) -> usize {
        self.batch * self.out_hw.0 * self.out_hw.1
    }

    pub fn apply<T: Real>(&self, x: &Mat<T>) -> Mat<T> {
        assert_eq!(x.rows(), self.in_rows(), "resample input rows");
        let c = x.cols();
        let (ih, iw) = self.in_hw;
        let (oh, ow) = self.out_hw;
        // x axis: (b, ih, iw) -> (b, ih, ow)
        let mut tmp = Mat::<T>::zeros(self.batch * ih * ow, c);
        for b in 0..self.batch {
            for y in 0..ih {
                for (ox, taps) in self.xtaps.iter().enumerate() {
                    let dst = (b * ih + y) * ow + ox;
                    for &(ix, w) in taps {
                        let w = T::from_f64(w);
                        let src = (b * ih + y) * iw + ix;
                        axpy(tmp.row_mut(dst), x.row(src), w);
                    }
                }
            }
        }
        // y axis: (b, ih, ow) -> (b, oh, ow)
        let mut out = Mat::<T>::zeros(self.out_rows(), c);
        for b in 0..self.batch {
            for (oy, taps) in self.ytaps.iter().enumerate() {
                for &(iy, w) in taps {
                    let w = T::from_f64(w);
                    for ox in 0..ow {
                        let dst = (b * oh + oy) * ow + ox;
                        let src = (b * ih + iy) * ow + ox;
                        axpy(out.row_mut(dst), tmp.row(src), w);
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`apply`](Self::apply): maps an output-grid gradient back to the input grid.
    pub fn apply_adjoint<T: Real>(&self, g: &Mat<T>) -> Mat<T> {
        assert_eq!(g.rows(), self.out_rows(), "resample adjoint rows");
        let c = g.cols();
        let (ih, iw) = self.in_hw;
        let (oh, ow) = self.out_hw;
        let mut tmp = Mat::<T>::zeros(self.batch * ih * ow, c);
        for b in 0..self.batch {
            for (oy, taps) in self.ytaps.iter().enumerate() {
                for &(iy, w) in taps {
                    let w = T::from_f64(w);
                    for ox in 0..ow {
                        let src = (b * oh + oy) * ow + ox;
                        let dst = (b * ih + iy) * ow + ox;
                        axpy(tmp.row_mut(dst), g.row(src), w);
                    }
                }
            }
        }
        let mut out = Mat::<T>::zeros(self.in_rows(), c);
        for b in 0..self.batch {
            for y in 0..ih {
                for (ox, taps) in self.xtaps.iter().enumerate() {
                    let src = (b * ih + y) * ow + ox;
                    for &(ix, w) in taps {
                        let w = T::from_f64(w);
                        let dst = (b * ih + y) * iw + ix;
                        axpy(out.row_mut(dst), tmp.row(src), w);
                    }
                }
            }
        }
        out
    }
}

#[inline]
fn axpy<T: Real>(dst: &mut [T], src: &[T], w: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + w * s;
    }
}

/// Nearest-neighbour resampling of a categorical label map.
pub fn resample_labels(labels: &[u8], in_hw: (usize, usize), out_hw: (usize, usize)) -> Vec<u8> {
    let ys = nearest_taps(in_hw.0, out_hw.0);
    let xs = nearest_taps(in_hw.1, out_hw.1);
    let mut out = Vec::with_capacity(out_hw.0 * out_hw.1);
    for yt in &ys {
        for xt in &xs {
            out.push(labels[yt[0].0 * in_hw.1 + xt[0].0]);
        }
    }
    out
}
