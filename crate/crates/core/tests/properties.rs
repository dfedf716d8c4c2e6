//! Property tests for invariants of the metrics, attention, pooling, masking and augmentation.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vidseg::autograd::Tape;
use vidseg::clipio::{ClassVocabulary, Frame, VideoClipSample};
use vidseg::encoders::{HashTextEncoder, PoolEnhance};
use vidseg::metrics::ConfusionAccumulator;
use vidseg::nn::{Fmap, Linear};
use vidseg::params::{ParamBuilder, ParamStore};
use vidseg::rfe::region_pool;
use vidseg::stcf::pairwise_attention;
use vidseg::tensor::Mat;
use vidseg::train::{mask_unseen, Augment};
use vidseg::vte::build_cost_volume;

fn mat(r: usize, c: usize, data: Vec<f64>) -> Mat<f64> {
    Mat::from_vec(r, c, data)
}

fn labels(n: usize, len: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(prop_oneof![8 => 0..n as u8, 1 => Just(255u8)], len)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn metrics_are_invariant_to_relabeling(
        (n, gt, pred) in (2usize..6).prop_flat_map(|n| (Just(n), labels(n, 64), prop::collection::vec(0..n as u8, 64))),
        seed in any::<u64>(),
    ) {
        let mut perm: Vec<u8> = (0..n as u8).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let map = |v: &[u8]| v.iter().map(|&l| if l == 255 { 255 } else { perm[l as usize] }).collect::<Vec<u8>>();
        let mut a = ConfusionAccumulator::new(n, 255);
        a.accumulate(&pred, &gt).unwrap();
        let mut b = ConfusionAccumulator::new(n, 255);
        b.accumulate(&map(&pred), &map(&gt)).unwrap();
        match (a.finalize(None), b.finalize(None)) {
            (Ok(x), Ok(y)) => {
                prop_assert!((x.miou - y.miou).abs() < 1e-12);
                prop_assert!((x.fwiou - y.fwiou).abs() < 1e-12);
                prop_assert!((x.macc - y.macc).abs() < 1e-12);
                prop_assert_eq!(x.pacc, y.pacc);
                for c in 0..n {
                    prop_assert_eq!(x.per_class_iou[c], y.per_class_iou[perm[c] as usize]);
                }
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "relabeling changed whether metrics exist"),
        }
    }

    #[test]
    fn accumulation_order_does_not_matter(
        frames in prop::collection::vec((labels(4, 16), prop::collection::vec(0u8..4, 16)), 1..6),
        seed in any::<u64>(),
    ) {
        let mut fwd = ConfusionAccumulator::new(4, 255);
        for (g, p) in &frames {
            fwd.accumulate(p, g).unwrap();
        }
        let mut order: Vec<usize> = (0..frames.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut shuffled = ConfusionAccumulator::new(4, 255);
        for &i in &order {
            shuffled.accumulate(&frames[i].1, &frames[i].0).unwrap();
        }
        prop_assert_eq!(&fwd.counts, &shuffled.counts);
        prop_assert_eq!(fwd.ignored, shuffled.ignored);
    }

    #[test]
    fn attention_rows_are_distributions(
        (pq, pk, d) in (1usize..6, 1usize..6, 1usize..5),
        scale in 0.01f64..50.0,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |rows, cols| Mat::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale));
        let store = ParamStore::<f64>::new();
        let mut t = Tape::new(&store);
        let q = t.constant(r(pq, d));
        let k = t.constant(r(pk, d));
        let v = t.constant(r(pk, 2));
        let (a, _) = pairwise_attention(&mut t, q, k, v, false);
        let a = t.value(a);
        for i in 0..pq {
            let s: f64 = a.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(a.row(i).iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn region_pooling_permutes_with_regions(
        (p, c, k) in (1usize..8, 1usize..4, 2usize..5),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let conv = Linear::new(&mut ParamBuilder::new(&mut store, seed), "r", c, k, true);
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let mut permuted = store.clone();
        for id in [conv.w, conv.b.unwrap()] {
            let m = store.get(id).clone();
            let out = permuted.get_mut(id);
            for r in 0..m.rows() {
                for (j, &src) in perm.iter().enumerate() {
                    out.set(r, j, m.get(r, src));
                }
            }
        }
        let d = Mat::from_fn(p, c, |_, _| rng.gen_range(-2.0..2.0));
        let run = |s: &ParamStore<f64>| {
            let mut t = Tape::new(s);
            let dv = t.constant(d.clone());
            let ctx = region_pool(&mut t, &conv, dv);
            t.value(ctx.l_r).clone()
        };
        let (base, other) = (run(&store), run(&permuted));
        for (j, &src) in perm.iter().enumerate() {
            prop_assert_eq!(other.row(j), base.row(src));
        }
    }

    #[test]
    fn cosine_entries_are_bounded(
        (p, n, c) in (1usize..6, 1usize..5, 1usize..6),
        data in prop::collection::vec(-1e3f64..1e3, 60),
        zero_row in any::<bool>(),
    ) {
        let mut fv = mat(p, c, data[..p * c].to_vec());
        let ft = mat(n, c, data[30..30 + n * c].to_vec());
        if zero_row {
            for j in 0..c {
                fv.set(0, j, 0.0);
            }
        }
        let store = ParamStore::<f64>::new();
        let mut t = Tape::new(&store);
        let tv = t.constant(ft);
        let vv = t.constant(fv);
        let cv = build_cost_volume(&mut t, tv, Fmap::new(vv, p, 1)).unwrap();
        let x = t.value(cv.x);
        prop_assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        if zero_row {
            prop_assert!(x.row(0).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn masking_never_touches_seen_content(
        target in labels(6, 36),
        past in prop::collection::vec(prop::option::of(labels(6, 36)), 0..3),
        random in prop::option::of(labels(6, 36)),
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = ClassVocabulary::new((0..6).map(|i| format!("c{i}")).collect(), vec![0, 1, 2, 3], vec![4, 5], 255).unwrap();
        let mut frame = || Frame::new(6, 6, (0..108).map(|_| rng.gen_range(0.1f32..1.0)).collect());
        let s = VideoClipSample {
            past_frames: past.iter().map(|_| frame()).collect(),
            target_frame: frame(),
            random_frame: frame(),
            target_mask: target.clone(),
            past_masks: past.clone(),
            timestamps: (0..=past.len()).collect(),
            random_timestamp: 9,
            random_mask: random.clone(),
            h: 6,
            w: 6,
        };
        let m = mask_unseen(&s, &vocab);
        let unseen = |l: u8| l == 4 || l == 5;
        for i in 0..36 {
            if unseen(target[i]) {
                prop_assert_eq!(m.target_mask[i], 255);
            } else {
                prop_assert_eq!(m.target_mask[i], target[i]);
            }
            let covered = |own: Option<&Vec<u8>>| unseen(target[i]) || own.is_some_and(|o| unseen(o[i]));
            let same = |a: &Frame, b: &Frame| (0..3).all(|ch| a.data[i * 3 + ch] == b.data[i * 3 + ch]);
            prop_assert_eq!(!same(&s.target_frame, &m.target_frame), unseen(target[i]));
            for (k, f) in s.past_frames.iter().enumerate() {
                prop_assert_eq!(!same(f, &m.past_frames[k]), covered(past[k].as_ref()));
            }
            prop_assert_eq!(!same(&s.random_frame, &m.random_frame), covered(random.as_ref()));
        }
    }

    #[test]
    fn augmentation_keeps_frames_and_masks_aligned(
        (h, w) in (8usize..20, 8usize..20),
        crop in 4usize..8,
        smax in 1.0f64..2.0,
        mask in prop::collection::vec(0u8..2, 400),
        seed in any::<u64>(),
    ) {
        let mask = mask[..h * w].to_vec();
        // The frame is the label indicator, so each output pixel's bilinear value must
        // favour its nearest-neighbour label: the nearest tap carries weight >= 1/4.
        let frame = Frame::new(h, w, mask.iter().flat_map(|&l| [l as f32, 0.0, 0.0]).collect());
        let aug = Augment::draw((h, w), crop, 1.0, smax, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let f = aug.frame(&frame);
        let m = aug.mask(&mask);
        prop_assert_eq!((f.h, f.w, m.len()), (crop, crop, crop * crop));
        for i in 0..crop * crop {
            let v = f.data[i * 3];
            if m[i] == 1 {
                prop_assert!(v >= 0.25 - 1e-6, "label 1 at {i} with value {v}");
            } else {
                prop_assert!(v <= 0.75 + 1e-6, "label 0 at {i} with value {v}");
            }
        }
    }

    #[test]
    fn pool_enhance_keeps_shape(
        (h, w, c) in (1usize..9, 1usize..9, 1usize..5),
        ratios in prop::sample::subsequence(vec![1usize, 2, 3, 4], 1..4),
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let pe = PoolEnhance::new(&mut ParamBuilder::new(&mut store, seed), "pe", c, &ratios);
        let mut t = Tape::new(&store);
        let u = t.constant(Mat::from_fn(h * w, c, |_, _| rng.gen_range(-1.0..1.0)));
        let out = pe.forward(&mut t, Fmap::new(u, h, w));
        prop_assert_eq!(out.hw(), (h, w));
        prop_assert_eq!(t.shape(out.v), (h * w, c));
    }

    #[test]
    fn text_rows_depend_only_on_their_own_name(
        names in prop::collection::vec("[a-z]{1,6}( [a-z]{1,6})?", 1..6),
        pick in any::<prop::sample::Index>(),
    ) {
        let mut store = ParamStore::<f64>::new();
        let enc = HashTextEncoder::new(&mut ParamBuilder::new(&mut store, 3), 64, 4);
        let templates = vec!["a photo of a {}".to_string(), "{} here".to_string()];
        let mut t = Tape::new(&store);
        let all = enc.encode(&mut t, &names, &templates).unwrap();
        let i = pick.index(names.len());
        let one = enc.encode(&mut t, &names[i..=i], &templates).unwrap();
        let (a, b) = (t.value(all).row(i).to_vec(), t.value(one).row(0).to_vec());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
