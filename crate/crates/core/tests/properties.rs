//! Invariants checked against brute-force oracles on random inputs.

use ndarray::Array3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use longitrack_core::field::warp_labels;
use longitrack_core::harness::{patient_split, SplitRatios};
use longitrack_core::metrics::{dsc, nsd};
use longitrack_core::net::{diff_weight, FeatureMap};
use longitrack_core::prompts::{gaussian_heatmap, sample_mask_prompt};
use longitrack_core::registration::apply_field;
use longitrack_core::synth::make_standard_case;
use longitrack_core::{DeformationField, InstanceMask, PromptPoint, PromptRole};

mod oracles;
use oracles::{brute_dsc, brute_nsd};

fn mask_strategy(max: usize) -> impl Strategy<Value = Array3<bool>> {
    (2..=max, 2..=max, 2..=max).prop_flat_map(|(z, y, x)| {
        proptest::collection::vec(proptest::bool::weighted(0.3), z * y * x)
            .prop_map(move |v| Array3::from_shape_vec((z, y, x), v).unwrap())
    })
}

fn pair_strategy(max: usize) -> impl Strategy<Value = (Array3<bool>, Array3<bool>)> {
    mask_strategy(max).prop_flat_map(|a| {
        let n = a.len();
        let dim = a.dim();
        (Just(a), proptest::collection::vec(proptest::bool::weighted(0.3), n).prop_map(move |v| Array3::from_shape_vec(dim, v).unwrap()))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dsc_matches_voxel_counting((a, b) in pair_strategy(8)) {
        let d = dsc(&a, &b).unwrap();
        prop_assert!((d - brute_dsc(&a, &b)).abs() < 1e-12);
        prop_assert!((d - dsc(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(dsc(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn nsd_matches_all_pairs((a, b) in pair_strategy(7), tol in 0.5f64..3.0, sz in 0.5f64..2.0) {
        let spacing = [sz, 1.0, 0.75];
        let n = nsd(&a, &b, tol, spacing).unwrap();
        prop_assert!((n - brute_nsd(&a, &b, tol, spacing)).abs() < 1e-12, "{} vs {}", n, brute_nsd(&a, &b, tol, spacing));
        prop_assert_eq!(nsd(&a, &a, tol, spacing).unwrap(), 1.0);
    }

    #[test]
    fn nsd_monotone_in_tolerance((a, b) in pair_strategy(8), t1 in 0.1f64..4.0, dt in 0.0f64..4.0) {
        let lo = nsd(&a, &b, t1, [1.0; 3]).unwrap();
        let hi = nsd(&a, &b, t1 + dt, [1.0; 3]).unwrap();
        prop_assert!(lo <= hi + 1e-12);
    }

    #[test]
    fn diff_weight_of_equal_inputs_is_identity(c in 1usize..6, z in 1usize..6, y in 1usize..6, x in 1usize..6, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = c * z * y * x;
        let f = FeatureMap::from_vec(c, [z, y, x], (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
        prop_assert_eq!(diff_weight(&f, &f, 1e-5).unwrap(), f);
    }

    #[test]
    fn heatmap_peaks_at_prompt_and_decays(pz in 0i64..9, py in 0i64..9, px in 0i64..9, sigma in 0.5f64..3.0) {
        let p = PromptPoint::new([pz, py, px], PromptRole::Verified, 1);
        let h = gaussian_heatmap(&p, [9, 9, 9], sigma).unwrap();
        prop_assert_eq!(h.data[[pz as usize, py as usize, px as usize]], 1.0);
        let mut by_dist: Vec<(i64, f64)> = h.data.indexed_iter().map(|((z, y, x), &v)| {
            ((z as i64 - pz).pow(2) + (y as i64 - py).pow(2) + (x as i64 - px).pow(2), v)
        }).collect();
        by_dist.sort_by(|a, b| a.0.cmp(&b.0));
        for w in by_dist.windows(2) {
            if w[0].0 < w[1].0 {
                prop_assert!(w[1].1 <= w[0].1);
            } else {
                prop_assert_eq!(w[1].1, w[0].1);
            }
        }
    }

    #[test]
    fn sampled_prompts_lie_in_the_lesion(m in mask_strategy(6), seed in any::<u64>()) {
        let labels = m.mapv(|b| b as u32);
        prop_assume!(labels.iter().any(|&l| l == 1));
        let mask = InstanceMask::new(labels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let p = sample_mask_prompt(&mask, 1, &mut rng).unwrap();
            prop_assert_eq!(mask.labels()[[p.coord[0] as usize, p.coord[1] as usize, p.coord[2] as usize]], 1);
        }
    }

    #[test]
    fn patient_split_is_a_disjoint_cover(n in 3usize..200, seed in any::<u64>()) {
        let s = patient_split(n, &SplitRatios::default(), seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn constant_field_translates_prompts(t in proptest::array::uniform3(-3i64..=3), p in proptest::array::uniform3(3i64..7)) {
        let field = DeformationField::constant([10, 10, 10], t.map(|v| v as f64));
        let q = apply_field(&field, &PromptPoint::new(p, PromptRole::Baseline, 1)).unwrap();
        prop_assert_eq!(q.coord, [p[0] + t[0], p[1] + t[1], p[2] + t[2]]);
        prop_assert_eq!(q.role, PromptRole::Proposed);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn followup_mask_is_the_warped_baseline(seed in 0u64..10_000) {
        let case = make_standard_case(seed, [24, 24, 24], 3).unwrap();
        let field = case.truth_field.as_ref().unwrap();
        prop_assert!(field.min_jacobian() > 0.0);
        prop_assert_eq!(&warp_labels(&case.baseline.mask, field).unwrap(), &case.followup.mask);
    }
}
