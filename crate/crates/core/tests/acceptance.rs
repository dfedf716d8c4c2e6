//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero if a
//! hard criterion fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 2 3 4`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vidseg::autograd::Tape;
use vidseg::checkpoint::Checkpoint;
use vidseg::clipio::{load_dataset, Dataset};
use vidseg::config::{Config, Fusion, TextRefine};
use vidseg::gradcheck::{check_params, probe_loss, worst, GradReport};
use vidseg::metrics::ConfusionAccumulator;
use vidseg::nn::{multi_head_attention, Fmap, Linear};
use vidseg::params::{ParamBuilder, ParamStore};
use vidseg::protocol::{analytic_random_miou, evaluate, monte_carlo_random_miou, ClassFilter, Predictor};
use vidseg::rfe::{region_pool, Rfe};
use vidseg::stcf::{pairwise_attention, upsample_affinity, AffinityAggregator, AffinityMap, AuxHead, Stcf};
use vidseg::synthdata::{generate, make_default_benchmark, GeneratorSpec};
use vidseg::tensor::Mat;
use vidseg::train::{train_loop, TrainOutcome};
use vidseg::vte::{build_cost_volume, Vte, COSINE_EPS};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Status {
    Pass,
    Fail,
    /// Soft criterion: reported, never fails the run.
    SoftPass,
    SoftFail,
    NotApplicable,
}

struct Verdict {
    status: Status,
    detail: String,
}

fn verdict(ok: bool, detail: String) -> Verdict {
    Verdict { status: if ok { Status::Pass } else { Status::Fail }, detail }
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat<f64> {
    Mat::from_fn(r, c, |_, _| rng.gen_range(-scale..scale))
}

fn perturb(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, amount: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        for x in store.get_mut(id).data_mut() {
            *x += rng.gen_range(-amount..amount);
        }
    }
}

fn max_abs_diff(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()), "oracle shape");
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Shared fixtures

struct Fixtures {
    root: PathBuf,
    bench: Option<(Dataset, Dataset)>,
    concat: Option<(Config, TrainOutcome)>,
}

const TRAIN_SEED: u64 = 7;

impl Fixtures {
    fn new() -> Self {
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        let _ = fs::remove_dir_all(&root);
        fs::create_dir_all(&root).expect("work dir");
        Fixtures { root, bench: None, concat: None }
    }

    fn bench(&mut self) -> &(Dataset, Dataset) {
        if self.bench.is_none() {
            let dir = self.root.join("bench");
            make_default_benchmark(&dir, 0).expect("benchmark");
            let train = load_dataset(&dir.join("train")).expect("train split");
            let val = load_dataset(&dir.join("val")).expect("val split");
            self.bench = Some((train, val));
        }
        self.bench.as_ref().unwrap()
    }

    fn bench_config(overrides: &[&str]) -> Config {
        let mut cfg = Config::default();
        cfg.apply_overrides(&[format!("train.seed={TRAIN_SEED}")]).unwrap();
        cfg.apply_overrides(overrides).unwrap();
        cfg
    }

    fn concat(&mut self) -> &(Config, TrainOutcome) {
        if self.concat.is_none() {
            let cfg = Self::bench_config(&["vte.fusion=concat"]);
            let t0 = Instant::now();
            let outcome = train_loop(&cfg, &self.bench().0, None).expect("benchmark training");
            println!("    [fixture] benchmark training (concat, {} iterations): {:.0?}", cfg.train.iterations, t0.elapsed());
            self.concat = Some((cfg, outcome));
        }
        self.concat.as_ref().unwrap()
    }

    fn concat_checkpoint(&mut self) -> Checkpoint {
        let vocab = self.bench().0.vocab.clone();
        let (cfg, out) = self.concat();
        out.checkpoint(cfg, &vocab)
    }
}

// ---------------------------------------------------------------------------
// 2. Gradient suite

fn grad_stcf(raw_mode: bool) -> Vec<GradReport> {
    let mut store = ParamStore::<f64>::new();
    let mut pb = ParamBuilder::new(&mut store, 31);
    let stcf = Stcf::new(&mut pb, &[3, 4], 2, 3, raw_mode, 3);
    let aux = AuxHead::new(&mut pb, 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    perturb(&mut store, &mut rng, 0.1);
    let frames: Vec<(Mat<f64>, Mat<f64>, Mat<f64>, Mat<f64>)> = (0..3)
        .map(|_| {
            (rand_mat(&mut rng, 16, 3, 1.0), rand_mat(&mut rng, 4, 4, 1.0), rand_mat(&mut rng, 16, 3, 1.0), rand_mat(&mut rng, 4, 4, 1.0))
        })
        .collect();
    let f = |t: &mut Tape<f64>| {
        let mut raw = Vec::new();
        let mut enh = Vec::new();
        for (r1, r2, e1, e2) in &frames {
            raw.push(vec![Fmap::new(t.constant(r1.clone()), 4, 4), Fmap::new(t.constant(r2.clone()), 2, 2)]);
            enh.push(vec![Fmap::new(t.constant(e1.clone()), 4, 4), Fmap::new(t.constant(e2.clone()), 2, 2)]);
        }
        let fused = stcf.fuse_clip(t, &raw, &enh).unwrap();
        let logits = aux.auxiliary_logits(t, fused.o_t);
        let a = probe_loss(t, fused.o_t.v, 1);
        let b = probe_loss(t, logits.v, 2);
        t.add(a, b)
    };
    let ids: Vec<_> = store.ids().collect();
    check_params(&store, &ids, 1e-5, f)
}

fn grad_rfe() -> Vec<GradReport> {
    let mut store = ParamStore::<f64>::new();
    let rfe = Rfe::new(&mut ParamBuilder::new(&mut store, 41), &[3, 4], 4, 3, 2, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    perturb(&mut store, &mut rng, 0.1);
    let l1 = rand_mat(&mut rng, 16, 3, 1.0);
    let l2 = rand_mat(&mut rng, 4, 4, 1.0);
    let o = rand_mat(&mut rng, 4, 4, 1.0);
    let f = |t: &mut Tape<f64>| {
        let a = Fmap::new(t.constant(l1.clone()), 4, 4);
        let b = Fmap::new(t.constant(l2.clone()), 2, 2);
        let d = rfe.collapse_random_pyramid(t, &[a, b]);
        let ctx = rfe.region_pool(t, d.v);
        let o = t.constant(o.clone());
        let out = rfe.enhance_target(t, o, ctx.l_r).unwrap();
        let x = probe_loss(t, out, 3);
        let y = probe_loss(t, ctx.weights, 4);
        t.add(x, y)
    };
    let ids: Vec<_> = store.ids().collect();
    check_params(&store, &ids, 1e-5, f)
}

fn grad_vte(fusion: Fusion, refine: TextRefine) -> Vec<GradReport> {
    let mut store = ParamStore::<f64>::new();
    let vte = Vte::new(&mut ParamBuilder::new(&mut store, 51), &[3, 4], 4, 2, refine, 2, fusion, 3, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    perturb(&mut store, &mut rng, 0.2);
    let l1 = rand_mat(&mut rng, 16, 3, 1.0);
    let l2 = rand_mat(&mut rng, 4, 4, 1.0);
    let ft = rand_mat(&mut rng, 3, 4, 1.0);
    let o = rand_mat(&mut rng, 4, 4, 1.0);
    let img = rand_mat(&mut rng, 16, 3, 1.0);
    let f = |t: &mut Tape<f64>| {
        let a = Fmap::new(t.constant(l1.clone()), 4, 4);
        let b = Fmap::new(t.constant(l2.clone()), 2, 2);
        let fv = vte.dense_visual(t, &[a, b]);
        let ft = t.constant(ft.clone());
        let o = Fmap::new(t.constant(o.clone()), 2, 2);
        let out = vte.forward(t, ft, fv, fv.v, a, o).unwrap();
        let up = vte.upsample_logits(t, out.logits, &img, (4, 4));
        probe_loss(t, up.v, 5)
    };
    let ids: Vec<_> = store.ids().collect();
    check_params(&store, &ids, 1e-5, f)
}

fn criterion_2() -> Verdict {
    let t0 = Instant::now();
    let suites: Vec<(&str, Vec<GradReport>)> = vec![
        ("stcf", grad_stcf(false)),
        ("stcf raw", grad_stcf(true)),
        ("rfe", grad_rfe()),
        ("vte concat", grad_vte(Fusion::Concat, TextRefine::MhsaFfn)),
        ("vte add", grad_vte(Fusion::Add, TextRefine::Mhsa)),
    ];
    let elapsed = t0.elapsed();
    let mut detail = String::new();
    let mut ok = true;
    let mut checked = 0;
    for (name, reports) in &suites {
        let (param, err) = worst(reports);
        checked += reports.len();
        ok &= err < 1e-4;
        let _ = write!(detail, "{name}: worst {err:.2e} ({param}); ");
    }
    ok &= elapsed.as_secs_f64() < 60.0;
    let _ = write!(detail, "{checked} parameter tensors, {elapsed:.1?}");
    verdict(ok, detail)
}

// ---------------------------------------------------------------------------
// 3. Normalization suite

fn row_sum_error(m: &Mat<f64>) -> f64 {
    (0..m.rows()).map(|r| (m.row(r).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

fn row_sum_error_f32(m: &Mat<f32>) -> f64 {
    (0..m.rows()).map(|r| (m.row(r).iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

fn criterion_3() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_sum = 0.0f64;
    let mut worst_cos = 0.0f64;
    let mut worst_sum_f32 = 0.0f64;
    for trial in 0..100 {
        let scale = [0.1, 1.0, 10.0, 100.0][trial % 4];
        let store = {
            let mut s = ParamStore::<f64>::new();
            let mut pb = ParamBuilder::new(&mut s, trial as u64);
            let _ = AffinityAggregator::new(&mut pb, "agg", 2, 3, false);
            let _ = Linear::new(&mut pb, "region", 4, 3, true);
            s
        };
        let mut store = store;
        perturb(&mut store, &mut rng, 0.3);
        let agg = AffinityAggregator { convs: vec![vidseg::nn::Conv2d { w: store.id("agg.conv0.weight").unwrap(), b: None, k: 3, stride: 1, cin: 1, cout: 1 }], raw: false };
        let region = Linear { w: store.id("region.weight").unwrap(), b: store.id("region.bias"), in_dim: 4, out_dim: 3 };
        let mut t = Tape::new(&store);
        let (h1, w1, h2, w2) = (rng.gen_range(2..5), rng.gen_range(2..5), rng.gen_range(1..3), rng.gen_range(1..3));
        let (p1, p2) = (h1 * w1, h2 * w2);
        let q1 = t.constant(rand_mat(&mut rng, p1, 4, scale));
        let k1 = t.constant(rand_mat(&mut rng, p1, 4, scale));
        let v1 = t.constant(rand_mat(&mut rng, p1, 4, 1.0));
        let q2 = t.constant(rand_mat(&mut rng, p2, 4, scale));
        let k2 = t.constant(rand_mat(&mut rng, p2, 4, scale));
        let v2 = t.constant(rand_mat(&mut rng, p2, 4, 1.0));
        let (a1, _) = pairwise_attention(&mut t, q1, k1, v1, false);
        let (a2, _) = pairwise_attention(&mut t, q2, k2, v2, false);
        let b = agg.aggregate(&mut t, &[AffinityMap { a: a1, hw: (h1, w1) }, AffinityMap { a: a2, hw: (h2, w2) }]).unwrap();
        let up = upsample_affinity(&mut t, a2, (h2, w2), (h1, w1));
        let ctx = region_pool(&mut t, &region, v1);
        let (_, maps) = multi_head_attention(&mut t, q1, k2, v2, 2);
        for v in [a1, a2, b[0], b[1], up, ctx.weights].into_iter().chain(maps) {
            worst_sum = worst_sum.max(row_sum_error(t.value(v)));
        }
        // Cost volume with some zero and near-parallel rows.
        let mut fv = rand_mat(&mut rng, p1, 4, scale);
        let mut ft = rand_mat(&mut rng, 3, 4, scale);
        for c in 0..4 {
            ft.set(0, c, fv.get(0, c) * 3.0);
            fv.set(p1 - 1, c, 0.0);
        }
        let ftv = t.constant(ft);
        let fvv = t.constant(fv);
        let cv = build_cost_volume(&mut t, ftv, Fmap::new(fvv, h1, w1)).unwrap();
        for &x in t.value(cv.x).data() {
            let excess = (x.abs() - 1.0).max(0.0);
            worst_cos = worst_cos.max(excess);
        }

        // The same operators at training precision.
        let store32 = store.cast::<f32>();
        let mut t = Tape::new(&store32);
        let q = t.constant(rand_mat(&mut rng, p1, 4, scale).cast());
        let k = t.constant(rand_mat(&mut rng, p1, 4, scale).cast());
        let v = t.constant(rand_mat(&mut rng, p1, 4, 1.0).cast());
        let (a, _) = pairwise_attention(&mut t, q, k, v, false);
        let ctx = region_pool(&mut t, &region, v);
        let (_, maps) = multi_head_attention(&mut t, q, k, v, 2);
        for v in [a, ctx.weights].into_iter().chain(maps) {
            worst_sum_f32 = worst_sum_f32.max(row_sum_error_f32(t.value(v)));
        }
        let ftv = t.constant(rand_mat(&mut rng, 3, 4, scale).cast());
        let cv = build_cost_volume(&mut t, ftv, Fmap::new(q, h1, w1)).unwrap();
        for &x in t.value(cv.x).data() {
            worst_cos = worst_cos.max((x.abs() as f64 - 1.0).max(0.0));
        }
    }
    let elapsed = t0.elapsed();
    let ok = worst_sum < 1e-6 && worst_sum_f32 < 1e-6 && worst_cos == 0.0 && elapsed.as_secs_f64() < 10.0;
    verdict(
        ok,
        format!(
            "max |row sum - 1|: {worst_sum:.1e} (f64), {worst_sum_f32:.1e} (f32); cost volume outside [-1, 1] by {worst_cos:.1e}; 100 trials, {elapsed:.1?}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Oracle suite

fn oracle_softmax_row(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn oracle_attention(q: &Mat<f64>, k: &Mat<f64>, v: &Mat<f64>) -> (Mat<f64>, Mat<f64>) {
    let d = q.cols() as f64;
    let mut a = Mat::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        let s: Vec<f64> = (0..k.rows()).map(|j| (0..q.cols()).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / d.sqrt()).collect();
        for (j, p) in oracle_softmax_row(&s).into_iter().enumerate() {
            a.set(i, j, p);
        }
    }
    let n = Mat::from_fn(q.rows(), v.cols(), |i, c| (0..k.rows()).map(|j| a.get(i, j) * v.get(j, c)).sum());
    (a, n)
}

/// 1-D pixel-centre bilinear weights from `n_in` to `n_out` samples, edges clamped.
fn oracle_bilinear_1d(n_in: usize, n_out: usize) -> Vec<Vec<f64>> {
    (0..n_out)
        .map(|d| {
            let mut w = vec![0.0; n_in];
            let x = ((d as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0).min((n_in - 1) as f64);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            let f = x - lo as f64;
            w[lo] += 1.0 - f;
            w[hi] += f;
            w
        })
        .collect()
}

/// Dense `(out pixels) x (in pixels)` bilinear matrix.
fn oracle_bilinear_2d(from: (usize, usize), to: (usize, usize)) -> Mat<f64> {
    let wy = oracle_bilinear_1d(from.0, to.0);
    let wx = oracle_bilinear_1d(from.1, to.1);
    Mat::from_fn(to.0 * to.1, from.0 * from.1, |r, c| wy[r / to.1][c / from.1] * wx[r % to.1][c % from.1])
}

fn oracle_aggregate(a1: &Mat<f64>, hw1: (usize, usize), a2: &Mat<f64>, hw2: (usize, usize), kernel: &[f64]) -> Mat<f64> {
    let m = oracle_bilinear_2d(hw2, hw1);
    let ratio = (hw2.0 * hw2.1) as f64 / (hw1.0 * hw1.1) as f64;
    let p = hw1.0 * hw1.1;
    let p2 = hw2.0 * hw2.1;
    let s = Mat::from_fn(p, p, |i, j| {
        let mut up = 0.0;
        for a in 0..p2 {
            for b in 0..p2 {
                up += m.get(i, a) * a2.get(a, b) * m.get(j, b);
            }
        }
        ratio * up + a1.get(i, j)
    });
    let mut y = Mat::zeros(p, p);
    for key in 0..p {
        for qy in 0..hw1.0 {
            for qx in 0..hw1.1 {
                let mut acc = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (qy as isize + ky as isize - 1, qx as isize + kx as isize - 1);
                        if sy >= 0 && sx >= 0 && (sy as usize) < hw1.0 && (sx as usize) < hw1.1 {
                            acc += kernel[ky * 3 + kx] * s.get(sy as usize * hw1.1 + sx as usize, key);
                        }
                    }
                }
                y.set(qy * hw1.1 + qx, key, acc.max(0.0) + 1e-12);
            }
        }
    }
    for i in 0..p {
        let z: f64 = y.row(i).iter().sum();
        let z = if z > 1e-12 { z } else { 1e-12 };
        for j in 0..p {
            y.set(i, j, y.get(i, j) / z);
        }
    }
    y
}

fn oracle_region_pool(d: &Mat<f64>, w: &Mat<f64>, b: &Mat<f64>) -> (Mat<f64>, Mat<f64>) {
    let (p, c, k) = (d.rows(), d.cols(), w.cols());
    let mut weights = Mat::zeros(k, p);
    for r in 0..k {
        let logits: Vec<f64> = (0..p).map(|i| (0..c).map(|ch| d.get(i, ch) * w.get(ch, r)).sum::<f64>() + b.get(0, r)).collect();
        for (i, x) in oracle_softmax_row(&logits).into_iter().enumerate() {
            weights.set(r, i, x);
        }
    }
    let l = Mat::from_fn(k, c, |r, ch| (0..p).map(|i| weights.get(r, i) * d.get(i, ch)).sum());
    (weights, l)
}

fn oracle_cosine(fv: &Mat<f64>, ft: &Mat<f64>) -> Mat<f64> {
    let norm = |m: &Mat<f64>, r: usize| m.row(r).iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
    Mat::from_fn(fv.rows(), ft.rows(), |p, n| {
        let dot: f64 = (0..fv.cols()).map(|c| fv.get(p, c) * ft.get(n, c)).sum();
        let (a, b) = (norm(fv, p), norm(ft, n));
        if a <= COSINE_EPS || b <= COSINE_EPS {
            0.0
        } else {
            dot / (a * b)
        }
    })
}

struct OracleMetrics {
    miou: f64,
    fwiou: f64,
    macc: f64,
    pacc: f64,
}

/// Counts straight from pixel pairs, class by class, with no confusion matrix.
fn oracle_metrics(pairs: &[(u8, u8)], n: usize, classes: &[usize]) -> Option<OracleMetrics> {
    let valid: Vec<(usize, usize)> = pairs.iter().filter(|p| p.1 != 255).map(|&(p, g)| (p as usize, g as usize)).collect();
    let mut iou = vec![None; n];
    let (mut iou_sum, mut iou_n, mut acc_sum, mut acc_n, mut hits, mut gt_sum) = (0.0, 0, 0.0, 0, 0u64, 0u64);
    for &c in classes {
        let inter = valid.iter().filter(|&&(p, g)| p == c && g == c).count() as u64;
        let union = valid.iter().filter(|&&(p, g)| p == c || g == c).count() as u64;
        let gt = valid.iter().filter(|&&(_, g)| g == c).count() as u64;
        if union > 0 {
            let v = inter as f64 / union as f64;
            iou[c] = Some(v);
            iou_sum += v;
            iou_n += 1;
        }
        if gt > 0 {
            acc_sum += inter as f64 / gt as f64;
            acc_n += 1;
        }
        hits += inter;
        gt_sum += gt;
    }
    if iou_n == 0 || gt_sum == 0 {
        return None;
    }
    let mut fw = 0.0;
    for &c in classes {
        if let Some(v) = iou[c] {
            let gt = valid.iter().filter(|&&(_, g)| g == c).count() as u64;
            fw += gt as f64 * v;
        }
    }
    Some(OracleMetrics {
        miou: iou_sum / iou_n as f64,
        fwiou: fw / gt_sum as f64,
        macc: acc_sum / acc_n as f64,
        pacc: hits as f64 / gt_sum as f64,
    })
}

fn criterion_4() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut e_att, mut e_agg, mut e_reg, mut e_cos) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut metric_mismatch = 0;
    let empty = ParamStore::<f64>::new();
    for trial in 0..100 {
        // pairwise attention
        let (pq, pk, d, c) = (rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..5), rng.gen_range(1..5));
        let (q, k, v) = (rand_mat(&mut rng, pq, d, 2.0), rand_mat(&mut rng, pk, d, 2.0), rand_mat(&mut rng, pk, c, 2.0));
        let mut t = Tape::new(&empty);
        let (qv, kv, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
        let (a, n) = pairwise_attention(&mut t, qv, kv, vv, false);
        let (oa, on) = oracle_attention(&q, &k, &v);
        e_att = e_att.max(max_abs_diff(t.value(a), &oa)).max(max_abs_diff(t.value(n), &on));

        // two-scale aggregation
        let hw2 = (rng.gen_range(1..3), rng.gen_range(1..3));
        let hw1 = (rng.gen_range(hw2.0..5), rng.gen_range(hw2.1..5));
        let softmax_mat = |rng: &mut ChaCha8Rng, p: usize| {
            let s = rand_mat(rng, p, p, 2.0);
            Mat::from_fn(p, p, |i, j| oracle_softmax_row(s.row(i))[j])
        };
        let a1 = softmax_mat(&mut rng, hw1.0 * hw1.1);
        let a2 = softmax_mat(&mut rng, hw2.0 * hw2.1);
        let kernel: Vec<f64> = (0..9).map(|i| if i == 4 { 1.0 } else { 0.0 } + rng.gen_range(-0.3..0.3)).collect();
        let mut store = ParamStore::<f64>::new();
        let agg = AffinityAggregator::new(&mut ParamBuilder::new(&mut store, trial), "agg", 2, 3, false);
        store.get_mut(agg.convs[0].w).data_mut().copy_from_slice(&kernel);
        let mut t = Tape::new(&store);
        let (v1, v2) = (t.constant(a1.clone()), t.constant(a2.clone()));
        let b = agg.aggregate(&mut t, &[AffinityMap { a: v1, hw: hw1 }, AffinityMap { a: v2, hw: hw2 }]).unwrap();
        e_agg = e_agg.max(max_abs_diff(t.value(b[0]), &oracle_aggregate(&a1, hw1, &a2, hw2, &kernel)));
        e_agg = e_agg.max(max_abs_diff(t.value(b[1]), &a2));

        // region pooling
        let (p, c, kr) = (rng.gen_range(1..10), rng.gen_range(1..5), rng.gen_range(1..5));
        let mut store = ParamStore::<f64>::new();
        let conv = Linear::new(&mut ParamBuilder::new(&mut store, trial), "r", c, kr, true);
        perturb(&mut store, &mut rng, 1.0);
        let dm = rand_mat(&mut rng, p, c, 2.0);
        let mut t = Tape::new(&store);
        let dv = t.constant(dm.clone());
        let ctx = region_pool(&mut t, &conv, dv);
        let (ow, ol) = oracle_region_pool(&dm, store.get(conv.w), store.get(conv.b.unwrap()));
        e_reg = e_reg.max(max_abs_diff(t.value(ctx.weights), &ow)).max(max_abs_diff(t.value(ctx.l_r), &ol));

        // cost volume, with occasional zero rows
        let (h, w, nc, ch) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..6));
        let mut fv = rand_mat(&mut rng, h * w, ch, 3.0);
        let mut ft = rand_mat(&mut rng, nc, ch, 3.0);
        if trial % 5 == 0 {
            for c in 0..ch {
                fv.set(0, c, 0.0);
                ft.set(nc - 1, c, 0.0);
            }
        }
        let mut t = Tape::new(&empty);
        let (tv, vv) = (t.constant(ft.clone()), t.constant(fv.clone()));
        let cv = build_cost_volume(&mut t, tv, Fmap::new(vv, h, w)).unwrap();
        e_cos = e_cos.max(max_abs_diff(t.value(cv.x), &oracle_cosine(&fv, &ft)));

        // metrics on 8x8 masks, N <= 5, exact
        let n = rng.gen_range(1..=5);
        let frames = rng.gen_range(1..4);
        let mut acc = ConfusionAccumulator::new(n, 255);
        let mut pairs = Vec::new();
        for _ in 0..frames {
            let gt: Vec<u8> = (0..64).map(|_| if rng.gen_bool(0.1) { 255 } else { rng.gen_range(0..n) as u8 }).collect();
            let pred: Vec<u8> = (0..64).map(|_| rng.gen_range(0..n) as u8).collect();
            acc.accumulate(&pred, &gt).unwrap();
            pairs.extend(pred.iter().copied().zip(gt.iter().copied()));
        }
        let filter: Option<Vec<usize>> = if rng.gen_bool(0.5) {
            None
        } else {
            let mut f: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.5)).collect();
            if f.is_empty() {
                f.push(rng.gen_range(0..n));
            }
            Some(f)
        };
        let classes = filter.clone().unwrap_or_else(|| (0..n).collect());
        match (acc.finalize(filter.as_deref()), oracle_metrics(&pairs, n, &classes)) {
            (Ok(r), Some(o)) => {
                if r.miou != o.miou || r.fwiou != o.fwiou || r.macc != o.macc || r.pacc != o.pacc {
                    metric_mismatch += 1;
                }
            }
            (Err(_), None) => {}
            _ => metric_mismatch += 1,
        }
    }
    let elapsed = t0.elapsed();
    let ok = e_att < 1e-6 && e_agg < 1e-6 && e_reg < 1e-6 && e_cos < 1e-6 && metric_mismatch == 0 && elapsed.as_secs_f64() < 60.0;
    verdict(
        ok,
        format!(
            "attention {e_att:.1e}, aggregation {e_agg:.1e}, region pool {e_reg:.1e}, cost volume {e_cos:.1e}, metric mismatches {metric_mismatch}; 100 trials each, {elapsed:.1?}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. Class-permutation equivariance

fn criterion_5(fx: &mut Fixtures) -> Verdict {
    let ck = fx.concat_checkpoint();
    let val = &fx.bench().1;
    let t0 = Instant::now();
    let p = Predictor::from_checkpoint(&ck).unwrap();
    let names = val.vocab.names().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut frames, mut mismatched) = (0, 0);
    for video in &val.videos {
        let mut perm: Vec<usize> = (0..names.len()).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<String> = perm.iter().map(|&i| names[i].clone()).collect();
        for target in [0, video.len() - 1] {
            let base = p.predict(val, video, target, &names).unwrap();
            let other = p.predict(val, video, target, &permuted).unwrap();
            mismatched += base.iter().zip(&other).filter(|&(&b, &o)| perm[o as usize] != b as usize).count();
            frames += 1;
        }
    }
    let elapsed = t0.elapsed();
    verdict(
        mismatched == 0 && elapsed.as_secs_f64() < 30.0,
        format!("{frames} frames under random permutations of 20 classes, {mismatched} pixels differ; {elapsed:.1?}"),
    )
}

// ---------------------------------------------------------------------------
// 6. Variable number of presented classes

fn criterion_6(fx: &Fixtures) -> Verdict {
    let dir = fx.root.join("c6");
    let spec = GeneratorSpec {
        held_out: ["red cross", "blue square", "yellow triangle", "purple circle"].map(String::from).to_vec(),
        videos: 3,
        frames: 8,
        seed: 6,
        ..GeneratorSpec::default()
    };
    generate(&spec, &dir).unwrap();
    let ds = load_dataset(&dir).unwrap();
    let mut cfg = Config::default();
    cfg.apply_overrides(&["train.iterations=20", "train.warmup_iters=5", "train.seed=6"]).unwrap();
    let out = train_loop(&cfg, &ds, None).unwrap();
    let ck = out.checkpoint(&cfg, &ds.vocab);
    let p = Predictor::from_checkpoint(&ck).unwrap();
    let all = ds.vocab.names().to_vec();
    let seen: Vec<String> = ds.vocab.seen().iter().map(|&i| all[i].clone()).collect();
    let mut worst = 0.0f64;
    let mut frames = 0;
    for video in &ds.videos {
        for target in [0, 4, video.len() - 1] {
            let l16 = p.logits(&ds, video, target, &seen).unwrap();
            let l20 = p.logits(&ds, video, target, &all).unwrap();
            for (j, &c) in ds.vocab.seen().iter().enumerate() {
                for r in 0..l16.rows() {
                    worst = worst.max((l16.get(r, j) - l20.get(r, c)).abs() as f64);
                }
            }
            frames += 1;
        }
    }
    verdict(
        out.presented.len() == 16 && all.len() == 20 && worst <= 1e-6,
        format!("trained with {} classes, inferred with {}; max shared-logit difference {worst:.1e} over {frames} frames", out.presented.len(), all.len()),
    )
}

// ---------------------------------------------------------------------------
// 7. Overfit

fn criterion_7(fx: &Fixtures) -> Verdict {
    let dir = fx.root.join("c7");
    let spec = GeneratorSpec { held_out: Vec::new(), videos: 4, seed: 1, ..GeneratorSpec::default() };
    generate(&spec, &dir).unwrap();
    let ds = load_dataset(&dir).unwrap();
    let t0 = Instant::now();
    let cfg = Config::default();
    let out = train_loop(&cfg, &ds, None).unwrap();
    let train_time = t0.elapsed();
    let rep = evaluate(&out.checkpoint(&cfg, &ds.vocab), &ds, ClassFilter::All).unwrap();
    let first = out.history.first().map(|r| r.loss).unwrap_or(f64::NAN);
    let last = out.history.last().map(|r| r.loss).unwrap_or(f64::NAN);
    verdict(
        rep.metrics.miou >= 0.90,
        format!(
            "4 videos, {} iterations: training-frame mIoU {:.4} (pAcc {:.4}); loss {first:.3} -> {last:.3}; train {train_time:.0?}",
            out.history.len(),
            rep.metrics.miou,
            rep.metrics.pacc
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. Zero-shot generalization

fn unseen_eval(fx: &mut Fixtures, ck: &Checkpoint) -> vidseg::protocol::EvalReport {
    evaluate(ck, &fx.bench().1, ClassFilter::Unseen).unwrap()
}

fn criterion_8(fx: &mut Fixtures) -> (Verdict, f64) {
    let ck = fx.concat_checkpoint();
    let rep = unseen_eval(fx, &ck);
    let unseen = fx.bench().1.vocab.unseen().to_vec();
    let n = rep.class_names.len();
    let mc = monte_carlo_random_miou(&rep.metrics.gt_pixels, n, Some(&unseen), 20, 8).unwrap();
    let analytic = analytic_random_miou(&rep.metrics.gt_pixels, n, Some(&unseen));
    let ratio = rep.metrics.miou / mc.mean;
    (
        verdict(
            ratio >= 2.0,
            format!(
                "unseen mIoU {:.4} vs random baseline {:.4} (Monte-Carlo, {} trials, std {:.1e}; analytic {:.4}): {ratio:.1}x, need 2x",
                rep.metrics.miou, mc.mean, mc.trials, mc.std, analytic
            ),
        ),
        rep.metrics.miou,
    )
}

// ---------------------------------------------------------------------------
// 9. Ablation directions (soft)

fn criterion_9(fx: &mut Fixtures, concat_unseen: f64) -> Verdict {
    let mut rows = vec![("concat (full model)".to_string(), concat_unseen)];
    for (label, overrides) in [("add fusion", &["vte.fusion=add"][..]), ("RFE disabled", &["rfe.enabled=false"][..])] {
        let cfg = Fixtures::bench_config(overrides);
        let t0 = Instant::now();
        let out = train_loop(&cfg, &fx.bench().0, None).unwrap();
        let ck = out.checkpoint(&cfg, &fx.bench().0.vocab);
        let rep = unseen_eval(fx, &ck);
        println!("    [fixture] ablation {label}: {:.0?}", t0.elapsed());
        rows.push((label.to_string(), rep.metrics.miou));
    }
    let (concat, add, no_rfe) = (rows[0].1, rows[1].1, rows[2].1);
    let a = concat >= add;
    let b = no_rfe <= concat;
    let mut report = String::from("| variant | unseen mIoU |\n|---|---|\n");
    for (label, m) in &rows {
        let _ = writeln!(report, "| {label} | {m:.4} |");
    }
    let _ = writeln!(report, "\n(a) concat >= add: {}\n(b) disabling RFE does not improve: {}", a, b);
    let path = fx.root.join("ablation_report.md");
    fs::write(&path, &report).unwrap();
    Verdict {
        status: if a && b { Status::SoftPass } else { Status::SoftFail },
        detail: format!(
            "unseen mIoU concat {concat:.4}, add {add:.4}, no RFE {no_rfe:.4}; (a) {} (b) {}; report {}",
            if a { "holds" } else { "violated" },
            if b { "holds" } else { "violated" },
            path.display()
        ),
    }
}

// ---------------------------------------------------------------------------
// 10. Leakage audit

fn criterion_10(fx: &mut Fixtures) -> Verdict {
    let (leaked, supervised) = {
        let (_, out) = fx.concat();
        (out.leaked_pixels, out.supervised_pixels)
    };
    let train = &fx.bench().0;
    let unseen_in_data: u64 = train
        .videos
        .iter()
        .flat_map(|v| v.masks.iter().flatten())
        .map(|m| m.iter().filter(|&&l| l != 255 && train.vocab.is_unseen(l as usize)).count() as u64)
        .sum();
    // The counter must be live: without masking, unseen pixels are supervised and counted.
    let val = fx.bench().1.clone();
    let mut cfg = Config::default();
    cfg.apply_overrides(&["protocol.mask_unseen=false", "train.iterations=3", "train.warmup_iters=1"]).unwrap();
    let probe = train_loop(&cfg, &val, None).unwrap();
    verdict(
        leaked == 0 && supervised > 0 && unseen_in_data > 0 && probe.leaked_pixels > 0,
        format!(
            "masked training: {leaked} unseen pixels of {supervised} supervised ({unseen_in_data} unseen pixels in the training data); unmasked probe counts {}",
            probe.leaked_pixels
        ),
    )
}

// ---------------------------------------------------------------------------
// 11. Determinism

fn criterion_11(fx: &Fixtures) -> Verdict {
    let data_dir = fx.root.join("c11");
    let spec = GeneratorSpec { videos: 3, frames: 10, seed: 11, ..GeneratorSpec::default() };
    generate(&spec, &data_dir).unwrap();
    let ds = load_dataset(&data_dir).unwrap();
    let mut cfg = Config::default();
    cfg.apply_overrides(&["train.iterations=30", "train.warmup_iters=5", "train.seed=11", "train.checkpoint_every=10"]).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let run = |tag: &str| -> (Vec<u8>, Vec<u8>, String) {
        let out_dir = fx.root.join(format!("c11_{tag}"));
        pool.install(|| {
            let out = train_loop(&cfg, &ds, Some(&out_dir)).unwrap();
            let ck = Checkpoint::load(&out_dir.join("checkpoint.bin")).unwrap();
            let rep = evaluate(&ck, &ds, ClassFilter::All).unwrap();
            assert_eq!(out.history.len(), 30);
            (
                fs::read(out_dir.join("checkpoint.bin")).unwrap(),
                fs::read(out_dir.join("train_log.csv")).unwrap(),
                rep.to_json(),
            )
        })
    };
    let a = run("a");
    let b = run("b");
    let same_ck = a.0 == b.0;
    let same_log = a.1 == b.1;
    let same_json = a.2 == b.2;
    verdict(
        same_ck && same_log && same_json,
        format!(
            "checkpoint bytes identical: {same_ck} ({} bytes); training log identical: {same_log}; metrics JSON identical: {same_json}",
            a.0.len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn record(results: &mut BTreeMap<u32, (Verdict, f64)>, n: u32, f: impl FnOnce() -> Verdict) {
    let t0 = Instant::now();
    let v = f();
    let secs = t0.elapsed().as_secs_f64();
    println!("  criterion {n:>2} finished in {secs:.1}s");
    results.insert(n, (v, secs));
}

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut fx = Fixtures::new();
    let mut results: BTreeMap<u32, (Verdict, f64)> = BTreeMap::new();

    if want(1) {
        record(&mut results, 1, || Verdict {
            status: Status::NotApplicable,
            detail: "paper-scale benchmarks need real video datasets and pretrained encoders; replaced by criteria 2-11".into(),
        });
    }
    if want(2) {
        record(&mut results, 2, criterion_2);
    }
    if want(3) {
        record(&mut results, 3, criterion_3);
    }
    if want(4) {
        record(&mut results, 4, criterion_4);
    }
    if want(6) {
        record(&mut results, 6, || criterion_6(&fx));
    }
    if want(11) {
        record(&mut results, 11, || criterion_11(&fx));
    }
    if want(7) {
        record(&mut results, 7, || criterion_7(&fx));
    }
    let mut concat_unseen = None;
    if want(8) || want(9) {
        record(&mut results, 8, || {
            let (v, m) = criterion_8(&mut fx);
            concat_unseen = Some(m);
            v
        });
        if !want(8) {
            results.remove(&8);
        }
    }
    if want(5) {
        record(&mut results, 5, || criterion_5(&mut fx));
    }
    if want(10) {
        record(&mut results, 10, || criterion_10(&mut fx));
    }
    if want(9) {
        let m = concat_unseen.expect("criterion 8 ran");
        record(&mut results, 9, || criterion_9(&mut fx, m));
    }

    println!();
    let mut hard_fail = false;
    for (n, (v, secs)) in &results {
        let tag = match v.status {
            Status::Pass => "PASS",
            Status::Fail => {
                hard_fail = true;
                "FAIL"
            }
            Status::SoftPass => "PASS (soft)",
            Status::SoftFail => "FAIL (soft, reported only)",
            Status::NotApplicable => "N/A",
        };
        println!("criterion {n:>2}: {tag} [{secs:.1}s] {}", v.detail);
    }
    if hard_fail {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
