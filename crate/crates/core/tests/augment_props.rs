use boss_core::augment::{self, AugmentPolicy, StrongParams, WeakParams};
use boss_core::rng::AugKey;
use boss_core::Tensor;
use proptest::prelude::*;

fn image(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
    let n = c * h * w;
    // deterministic texture with a spread of values
    Tensor::new(vec![c, h, w], (0..n).map(|i| ((i as u64).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f64 / 999.0).collect()).unwrap()
}

#[test]
fn strong_differs_from_weak_for_almost_every_seed() {
    let weak = AugmentPolicy::weak();
    let strong = AugmentPolicy::strong();
    let x = image(1, 3, 16, 16);
    let same = (0..1000)
        .filter(|&s| {
            let k = AugKey::new(s, 0, 0, 0);
            augment::augment(&weak, &x, k).unwrap() == augment::augment(&strong, &x, k).unwrap()
        })
        .count();
    assert!(same <= 10, "{same} of 1000 strong views equal their weak view");
}

#[test]
fn cutout_zeroes_the_drawn_rectangle() {
    let policy = AugmentPolicy {
        ops_per_sample: 0,
        cutout_fraction: 0.5,
        cutout_fill: vec![0.0],
        flip_probability: 0.0,
        max_translate_fraction: 0.0,
        ..AugmentPolicy::strong()
    };
    let ones = Tensor::filled(&[3, 12, 12], 1.0);
    for s in 0..200 {
        let key = AugKey::new(s, 3, 4, 5);
        let rect = StrongParams::draw(&policy, 12, 12, key).unwrap().cutout.unwrap();
        let out = augment::strong(&policy, &ones, key).unwrap();
        let side = 6;
        assert!(rect.y1 - rect.y0 <= side && rect.x1 - rect.x0 <= side && rect.y1 > rect.y0 && rect.x1 > rect.x0);
        for ch in 0..3 {
            for y in 0..12 {
                for x in 0..12 {
                    let inside = (rect.y0..rect.y1).contains(&y) && (rect.x0..rect.x1).contains(&x);
                    assert_eq!(out.data()[(ch * 12 + y) * 12 + x], if inside { 0.0 } else { 1.0 });
                }
            }
        }
    }
}

#[test]
fn brightness_on_constant_image() {
    let policy = AugmentPolicy {
        strong_ops: vec![augment::StrongOp::Brightness],
        ops_per_sample: 1,
        cutout_fraction: 0.0,
        flip_probability: 0.0,
        max_translate_fraction: 0.0,
        brightness_range: (0.2, 1.8),
        ..AugmentPolicy::strong()
    };
    let c = 0.7;
    let x = Tensor::filled(&[1, 4, 4], c);
    for s in 0..100 {
        let key = AugKey::new(s, 0, 0, 0);
        let params = StrongParams::draw(&policy, 4, 4, key).unwrap();
        let augment::OpDraw::Brightness(f) = params.ops[0] else { panic!("expected brightness") };
        let out = augment::strong(&policy, &x, key).unwrap();
        assert!(out.data().iter().all(|&v| v == (c * f).clamp(0.0, 1.0)));
    }
}

#[test]
fn weak_policy_never_uses_strong_ops() {
    // the weak view equals flip + translate of the drawn parameters alone
    let policy = AugmentPolicy::weak();
    let x = image(5, 3, 8, 8);
    for s in 0..200 {
        let key = AugKey::new(s, 1, 2, 3);
        let p = WeakParams::draw(&policy, 8, 8, &mut key.rng());
        assert_eq!(augment::weak(&policy, &x, key).unwrap(), p.apply(&x).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn outputs_stay_in_range_and_shape(seed in any::<u64>(), sample in 0u64..1000, step in 0u64..1000, size in 4usize..12) {
        let x = image(seed, 3, size, size);
        for policy in [AugmentPolicy::weak(), AugmentPolicy::strong()] {
            let out = augment::augment(&policy, &x, AugKey::new(seed, sample, step, 0)).unwrap();
            prop_assert_eq!(out.shape(), x.shape());
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn same_key_same_draws(seed in any::<u64>(), sample in 0u64..1000, step in 0u64..1000) {
        let policy = AugmentPolicy::strong();
        let key = AugKey::new(seed, sample, step, 5);
        prop_assert_eq!(StrongParams::draw(&policy, 16, 16, key).unwrap(), StrongParams::draw(&policy, 16, 16, key).unwrap());
    }
}

#[test]
fn changing_any_key_component_changes_draws() {
    let policy = AugmentPolicy::strong();
    let base = AugKey::new(7, 11, 13, 5);
    let draw = |k| StrongParams::draw(&policy, 32, 32, k).unwrap();
    let variants = [AugKey::new(8, 11, 13, 5), AugKey::new(7, 12, 13, 5), AugKey::new(7, 11, 14, 5), AugKey::new(7, 11, 13, 4)];
    for v in variants {
        assert_ne!(draw(base), draw(v), "{v:?}");
    }
}
