use dsr_core::config::{Profile, SynthConfig};
use dsr_core::eval::{auroc, average_precision, image_score, ScoreAccumulator};
use dsr_core::synth::{inject_with_masks, perlin_mask, SimilarityBound, Sampling};
use dsr_core::vq::lookup;
use dsr_core::{default_device, AnomalyMask, Codebook, Level, MapResolution, SegmentationMap};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Pairwise count: positive above negative scores 1, a tie scores 1/2.
fn auroc_pairs(s: &[f64], l: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in (0..s.len()).filter(|&i| l[i]) {
        for j in (0..s.len()).filter(|&j| !l[j]) {
            den += 1.0;
            num += if s[i] > s[j] {
                1.0
            } else if s[i] == s[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}

/// Sum over thresholds of recall gain times precision at that threshold.
fn ap_sweep(s: &[f64], l: &[bool]) -> f64 {
    let pos = l.iter().filter(|&&x| x).count() as f64;
    let mut th: Vec<f64> = s.to_vec();
    th.sort_by(|a, b| b.total_cmp(a));
    th.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in th {
        let tp = s.iter().zip(l).filter(|(&x, &y)| x >= t && y).count() as f64;
        let k = s.iter().filter(|&&x| x >= t).count() as f64;
        let recall = tp / pos;
        ap += (recall - prev_recall) * tp / k;
        prev_recall = recall;
    }
    ap
}

/// Scores on a coarse lattice so ties are common, with both labels present.
fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..120).prop_flat_map(|n| {
        (prop::collection::vec(0u8..20, n), prop::collection::vec(any::<bool>(), n)).prop_map(|(s, mut l)| {
            l[0] = true;
            l[1] = false;
            (s.into_iter().map(|v| v as f64 / 19.0).collect(), l)
        })
    })
}

fn map_strategy() -> impl Strategy<Value = (usize, usize, Vec<f32>)> {
    (1usize..40, 1usize..40).prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(0f32..=1.0, h * w)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auroc_matches_pairwise_oracle((s, l) in scored()) {
        prop_assert!((auroc(&s, &l).unwrap() - auroc_pairs(&s, &l)).abs() < 1e-9);
    }

    #[test]
    fn ap_matches_threshold_sweep((s, l) in scored()) {
        prop_assert!((average_precision(&s, &l).unwrap() - ap_sweep(&s, &l)).abs() < 1e-9);
    }

    #[test]
    fn strictly_increasing_transforms_leave_metrics_unchanged((s, l) in scored(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let t: Vec<f64> = s.iter().map(|v| (a * v + b).exp()).collect();
        prop_assert!((auroc(&s, &l).unwrap() - auroc(&t, &l).unwrap()).abs() < 1e-12);
        prop_assert!((average_precision(&s, &l).unwrap() - average_precision(&t, &l).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_ordering((s, l) in scored(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let ps: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
        let pl: Vec<bool> = idx.iter().map(|&i| l[i]).collect();
        prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&ps, &pl).unwrap());
        prop_assert!((average_precision(&s, &l).unwrap() - average_precision(&ps, &pl).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn flipping_scores_mirrors_auroc((s, l) in scored()) {
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((auroc(&s, &l).unwrap() + auroc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn accumulator_shards_merge_to_the_whole((s, l) in scored(), split in 0usize..120) {
        let split = split.min(s.len());
        let mut a = ScoreAccumulator::new();
        let mut b = ScoreAccumulator::new();
        for (i, (&v, &y)) in s.iter().zip(&l).enumerate() {
            if i < split { a.push(v as f32, y) } else { b.push(v as f32, y) }
        }
        b.merge(a);
        let s32: Vec<f64> = s.iter().map(|&v| v as f32 as f64).collect();
        prop_assert_eq!(b.average_precision().unwrap(), average_precision(&s32, &l).unwrap());
    }

    #[test]
    fn image_score_stays_within_map_range((h, w, data) in map_strategy()) {
        let lo = data.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
        let hi = data.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let m = SegmentationMap::new(h, w, data, MapResolution::Feature).unwrap();
        let s = image_score(&m);
        prop_assert!(s >= lo - 1e-9 && s <= hi + 1e-9, "{s} outside [{lo}, {hi}]");
    }

    #[test]
    fn image_score_is_monotone_in_the_map((h, w, data) in map_strategy(), bump in 0f32..0.5) {
        let raised: Vec<f32> = data.iter().map(|v| (v + bump).min(1.0)).collect();
        let a = image_score(&SegmentationMap::new(h, w, data, MapResolution::Feature).unwrap());
        let b = image_score(&SegmentationMap::new(h, w, raised, MapResolution::Feature).unwrap());
        prop_assert!(b >= a - 1e-12);
    }

    #[test]
    fn drawn_ranks_stay_in_the_band(lambda in 0.01f64..0.9, n_k in 8usize..600, seed in any::<u64>()) {
        prop_assume!(((lambda * n_k as f64).floor() as usize) >= 1);
        let bound = SimilarityBound::new(lambda, n_k).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let n = bound.draw_upper(&mut rng);
            prop_assert!(n >= bound.floor_index() && n <= n_k);
            let k = bound.draw_rank(n, &mut rng).unwrap();
            prop_assert!(k >= bound.floor_index() && k <= n.min(n_k - 1));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn injection_alters_exactly_the_masked_cells(seed in any::<u64>(), uniform in any::<bool>()) {
        let dev = default_device();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n_k, d) = (40usize, 4usize);
        let hi = Codebook::random_uniform(n_k, d, Level::Hi, &mut rng, &dev).unwrap();
        let lo = Codebook::random_uniform(n_k, d, Level::Lo, &mut rng, &dev).unwrap();
        let (b, h, w) = (2usize, 8usize, 8usize);
        use rand::Rng;
        let ih: Vec<u32> = (0..b * h * w).map(|_| rng.random_range(0..n_k as u32)).collect();
        let il: Vec<u32> = (0..b * h * w / 4).map(|_| rng.random_range(0..n_k as u32)).collect();
        let q_hi = lookup(&hi, ih.clone(), b, h, w).unwrap();
        let q_lo = lookup(&lo, il.clone(), b, h / 2, w / 2).unwrap();
        let synth = SynthConfig::for_profile(Profile::Tiny);
        let masks: Vec<AnomalyMask> =
            (0..b).map(|i| perlin_mask(h * 4, w * 4, seed.wrapping_add(i as u64), &synth).unwrap().mask).collect();
        let sampling = if uniform { Sampling::Uniform } else { Sampling::bounded(0.05, n_k).unwrap() };
        let inj = inject_with_masks(&q_hi, &q_lo, &hi, &lo, &sampling, masks, &mut rng).unwrap();
        for i in 0..b {
            prop_assert_eq!(&inj.mask_hi[i].max_pool(2).unwrap(), &inj.mask_lo[i]);
            for (c, &m) in inj.mask_hi[i].data().iter().enumerate() {
                let k = i * h * w + c;
                prop_assert_eq!(m != 0, inj.q_hi.indices[k] != ih[k]);
            }
            for (c, &m) in inj.mask_lo[i].data().iter().enumerate() {
                let k = i * h * w / 4 + c;
                prop_assert_eq!(m != 0, inj.q_lo.indices[k] != il[k]);
            }
        }
        let codes = hi.to_vec().unwrap();
        let vals = inj.q_hi.data.permute((0, 2, 3, 1)).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (cell, &idx) in inj.q_hi.indices.iter().enumerate() {
            prop_assert_eq!(&vals[cell * d..(cell + 1) * d], &codes[idx as usize * d..(idx as usize + 1) * d]);
        }
    }
}

#[test]
fn single_class_sets_have_no_auroc_or_ap() {
    assert!(auroc(&[0.2, 0.4], &[false, false]).is_err());
    assert!(auroc(&[0.2, 0.4], &[true, true]).is_err());
    assert!(average_precision(&[0.2, 0.4], &[false, false]).is_err());
    assert!(ScoreAccumulator::new().average_precision().is_err());
}
