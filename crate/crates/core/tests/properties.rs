//! Property tests for structural invariants.

use ndarray::{Array2, Array4};
use proptest::prelude::*;
use sdit::diffusion::{weighted_mse, WeightMap};
use sdit::inference::plan_anchored_batch;
use sdit::model::{patchify, unpatchify};
use sdit::synthetic::{decode_local_signal, encode_local_signal};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patchify_round_trips(
        t in 1usize..4,
        grid in 1usize..5,
        p in 1usize..4,
        c in 1usize..4,
        seed in any::<u64>(),
    ) {
        let (h, w) = (grid * p, grid * p);
        let mut state = seed;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        let frames = Array4::from_shape_fn((t, h, w, c), |_| next());
        let grid_tokens = patchify(&frames, p).unwrap();
        let back = unpatchify(&grid_tokens, p, h, w).unwrap();
        prop_assert_eq!(frames, back);
    }

    #[test]
    fn weighted_mse_is_symmetric(
        seed in any::<u64>(),
        lambda in 0.0f64..3.0,
    ) {
        let mut state = seed | 1;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let a = Array4::from_shape_fn((2, 4, 4, 2), |_| next());
        let b = Array4::from_shape_fn((2, 4, 4, 2), |_| next());
        let maps: Vec<WeightMap> = (0..2)
            .map(|_| WeightMap {
                weights: Array2::from_shape_fn((4, 4), |_| if next() > 0.5 { 1.0 + lambda } else { 1.0 }),
                lambda_ex: lambda,
            })
            .collect();
        let ab = weighted_mse(&a, &b, &maps).unwrap();
        let ba = weighted_mse(&b, &a, &maps).unwrap();
        prop_assert_eq!(ab, ba);
    }

    #[test]
    fn local_signal_codec_is_a_bijection(values in proptest::collection::vec(0.0f64..=1.0, 16)) {
        let pts = Array2::from_shape_vec((8, 2), values).unwrap();
        let enc = encode_local_signal(pts.view()).unwrap();
        let dec = decode_local_signal(&enc).unwrap();
        prop_assert_eq!(dec, pts);
    }

    #[test]
    fn anchored_plan_covers_exactly(t_half in 1usize..8, b in 1usize..9) {
        let t = 2 * t_half + 1; // odd T >= 3
        let n = b * (t - 1) + 1;
        prop_assume!(n <= 64);
        let plan = plan_anchored_batch(n, t, b).unwrap();
        let mut counts = vec![0usize; n];
        for row in &plan.sequences {
            prop_assert!(row.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(row[plan.anchor_slot], plan.anchor_index);
            for &g in row {
                counts[g] += 1;
            }
        }
        for (g, &cnt) in counts.iter().enumerate() {
            prop_assert_eq!(cnt, if g == plan.anchor_index { b } else { 1 });
        }
    }
}
