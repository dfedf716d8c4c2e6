//! Central finite-difference checks of tape gradients, at 64-bit precision.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::autograd::{Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub analytic_norm: f64,
    pub rel_error: f64,
}

/// `sum(x * R)` for a fixed pseudo-random `R`; avoids losses whose gradient vanishes
/// by symmetry (e.g. summing a softmax).
pub fn probe_loss(t: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    let (r, c) = t.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Uniform::new(-1.0, 1.0);
    let w = t.constant(Mat::from_fn(r, c, |_, _| u.sample(&mut rng)));
    let p = t.mul(x, w);
    t.sum_all(p)
}

/// Compares analytic and numeric gradients for every listed parameter.
///
/// The relative error is `|g_a - g_n| / max(|g_a| + |g_n|, 1e-6)` over the whole tensor;
/// the floor keeps gradients that vanish by symmetry (e.g. key biases under softmax)
/// from turning rounding noise into a large ratio.
pub fn check_params(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    step: f64,
    f: impl Fn(&mut Tape<f64>) -> Var,
) -> Vec<GradReport> {
    let analytic = {
        let mut t = Tape::new(store);
        let loss = f(&mut t);
        t.backward(loss)
    };
    let mut work = store.clone();
    ids.iter()
        .map(|&id| {
            let shape = store.get(id).shape();
            let ga = analytic.param(id).cloned().unwrap_or_else(|| Mat::zeros(shape.0, shape.1));
            let mut gn = Mat::<f64>::zeros(shape.0, shape.1);
            for i in 0..ga.len() {
                let orig = work.get(id).data()[i];
                work.get_mut(id).data_mut()[i] = orig + step;
                let up = {
                    let mut t = Tape::new(&work);
                    let l = f(&mut t);
                    t.scalar(l)
                };
                work.get_mut(id).data_mut()[i] = orig - step;
                let down = {
                    let mut t = Tape::new(&work);
                    let l = f(&mut t);
                    t.scalar(l)
                };
                work.get_mut(id).data_mut()[i] = orig;
                gn.data_mut()[i] = (up - down) / (2.0 * step);
            }
            let mut diff = ga.clone();
            let mut neg = gn.clone();
            neg.scale_assign(-1.0);
            diff.add_assign(&neg);
            let denom = (ga.frobenius() + gn.frobenius()).max(1e-6);
            GradReport { name: store.name(id).to_string(), analytic_norm: ga.frobenius(), rel_error: diff.frobenius() / denom }
        })
        .collect()
}

/// Largest relative error in a report list, with its parameter name.
pub fn worst(reports: &[GradReport]) -> (String, f64) {
    reports
        .iter()
        .map(|r| (r.name.clone(), r.rel_error))
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a })
}
