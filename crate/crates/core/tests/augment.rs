use ndarray::{Array3, Array4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stssl_core::augment::{
    apply_to_clip, apply_to_localization, invert_on_localization, sample_augmentation, validity_mask, AugRecord,
    Strength, Transform,
};
use stssl_core::dataio::Clip;

fn record(seed: u64) -> AugRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let strength = if rng.random_bool(0.5) { Strength::Weak } else { Strength::Strong };
    sample_augmentation(strength, &mut rng)
}

proptest! {
    #[test]
    fn sampled_records_validate_and_round_trip_through_json(seed in any::<u64>()) {
        let r = record(seed);
        r.validate().unwrap();
        let back: AugRecord = serde_json::from_str(&r.to_json()).unwrap();
        prop_assert_eq!(back, r);
    }

    #[test]
    fn constant_maps_survive_the_round_trip(seed in any::<u64>(), c in 0.0..1.0f64) {
        let r = record(seed);
        let map = Array3::from_elem((4, 12, 14), c);
        let back = invert_on_localization(&apply_to_localization(&map, &r).unwrap(), &r).unwrap();
        let valid = validity_mask(&r, &[4, 12, 14]).unwrap();
        prop_assert!(valid.iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(valid.iter().any(|&v| v == 1.0));
        for (b, v) in back.iter().zip(valid.iter()) {
            if *v == 1.0 {
                prop_assert!((b - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn clips_keep_their_shape_and_range(seed in any::<u64>()) {
        let r = record(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let px = Array4::from_shape_fn((3, 10, 12, 3), |_| rng.random::<f64>());
        let clip = Clip::new(px, "v", vec![4, 6, 8], 25.0).unwrap();
        let out = apply_to_clip(&clip, &r).unwrap();
        prop_assert_eq!(out.pixels.shape(), clip.pixels.shape());
        prop_assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn flip_then_reverse_moves_pixels_where_expected() {
    let r = AugRecord { transforms: vec![Transform::HorizontalFlip, Transform::TemporalReverse], strength: Strength::Strong };
    let mut map = Array3::zeros((3, 2, 4));
    map[[0, 1, 0]] = 1.0;
    let out = apply_to_localization(&map, &r).unwrap();
    assert_eq!(out[[2, 1, 3]], 1.0);
    assert_eq!(out.sum(), 1.0);
    assert_eq!(invert_on_localization(&out, &r).unwrap(), map);
}
