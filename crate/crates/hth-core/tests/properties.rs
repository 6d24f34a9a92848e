//! Property tests over the structural invariants: plan bijectivity, gather /
//! scatter and patchify round trips, shift/flip algebra, and checkpoint IO.

use proptest::prelude::*;

use hth_core::checkpoint;
use hth_core::hydra::{flip, shift};
use hth_core::model::{patchify, unpatchify};
use hth_core::scan::{build_plan, gather, scatter, ScanPattern};
use hth_core::tensor::Tensor;

fn pattern_strategy() -> impl Strategy<Value = ScanPattern> {
    prop::sample::select(ScanPattern::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plans_are_bijections(
        pattern in pattern_strategy(),
        t in 1usize..5,
        h in 1usize..8,
        w in 1usize..8,
    ) {
        let plan = build_plan(pattern, (t, h, w)).unwrap();
        let mut seen = vec![false; plan.len()];
        for s in 0..plan.len() {
            prop_assert_eq!(plan.inv_perm[plan.perm[s]], s);
            prop_assert!(!seen[plan.perm[s]]);
            seen[plan.perm[s]] = true;
        }
    }

    #[test]
    fn gather_scatter_round_trip(
        pattern in pattern_strategy(),
        t in 1usize..4,
        h in 1usize..6,
        w in 1usize..6,
        d in 1usize..4,
        values in prop::collection::vec(-100.0f64..100.0, 1..512),
    ) {
        let n = t * h * w * d;
        let data: Vec<f64> = (0..n).map(|i| values[i % values.len()]).collect();
        let tokens = Tensor::new(vec![t * h * w, d], data).unwrap();
        let plan = build_plan(pattern, (t, h, w)).unwrap();
        let seq = gather(&plan, &tokens).unwrap();
        prop_assert_eq!(scatter(&plan, &seq).unwrap(), tokens);
    }

    #[test]
    fn patchify_round_trip(
        t in 1usize..3,
        hp in 1usize..4,
        wp in 1usize..4,
        c in 1usize..4,
        p in 1usize..3,
        values in prop::collection::vec(-10.0f64..10.0, 1..512),
    ) {
        let (h, w) = (hp * p, wp * p);
        let n = t * h * w * c;
        let data: Vec<f64> = (0..n).map(|i| values[i % values.len()]).collect();
        let grid = Tensor::new(vec![t, h, w, c], data).unwrap();
        let tokens = patchify(&grid, p).unwrap();
        prop_assert_eq!(tokens.shape(), &[t * hp * wp, p * p * c]);
        prop_assert_eq!(unpatchify(&tokens, (t, h, w), c, p).unwrap(), grid);
    }

    #[test]
    fn flip_involution_and_shift_nilpotence(
        rows in 1usize..12,
        cols in 1usize..5,
        values in prop::collection::vec(-10.0f64..10.0, 1..64),
    ) {
        let data: Vec<f64> = (0..rows * cols).map(|i| values[i % values.len()]).collect();
        let x = Tensor::new(vec![rows, cols], data).unwrap();
        prop_assert_eq!(flip(&flip(&x)), x.clone());
        // shifting T times empties the sequence
        let mut y = x;
        for _ in 0..rows {
            y = shift(&y);
        }
        prop_assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_preserves_f32_payload(
        dims in prop::collection::vec(1usize..6, 1..4),
        seed in 0u64..1000,
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let t = hth_core::tensor::randn(&dims, &mut rng);
        let dir = std::env::temp_dir().join(format!("hth_prop_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("t{seed}.hth1"));
        checkpoint::save(&[("x".to_string(), t.clone())], &path).unwrap();
        let back = checkpoint::load(&path).unwrap();
        std::fs::remove_file(&path).ok();
        prop_assert_eq!(back.len(), 1);
        prop_assert_eq!(back[0].1.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back[0].1.data()) {
            prop_assert_eq!(*a as f32, *b as f32);
        }
    }
}
