mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stcr::augment::{
    gaussian_noise, inter_video_mixup, intra_video_mixup, intra_video_mixup_with, sample_lambda, video_cutmix,
    video_mixup,
};
use stcr::VideoClip;

fn clip_strategy(min_side: usize) -> impl Strategy<Value = VideoClip> {
    (1usize..4, 2usize..7, min_side..6, min_side..6).prop_flat_map(|(c, t, h, w)| {
        prop::collection::vec(-5.0f64..5.0, c * t * h * w)
            .prop_map(move |v| VideoClip::from_vec([c, t, h, w], v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn mixup_scales_frame_differences(clip in clip_strategy(1), lambda in 0.0f64..=1.0, k_seed in any::<usize>()) {
        let k = k_seed % clip.frames();
        let out = intra_video_mixup_with(&clip, lambda, k).unwrap();
        let [c, t, h, w] = clip.dims();
        for ch in 0..c {
            for j1 in 0..t {
                for j2 in 0..t {
                    for y in 0..h {
                        for x in 0..w {
                            let got = out.at(ch, j1, y, x) - out.at(ch, j2, y, x);
                            let want = (1.0 - lambda) * (clip.at(ch, j1, y, x) - clip.at(ch, j2, y, x));
                            prop_assert!((got - want).abs() <= 1e-12, "{} vs {}", got, want);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn every_variant_keeps_shape_and_is_seeded(a in clip_strategy(2), seed in any::<u64>()) {
        let b = VideoClip::from_fn(a.dims(), |i| (i % 7) as f64);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            vec![
                intra_video_mixup(&a, 1.0, &mut rng).unwrap().0,
                inter_video_mixup(&a, &b, 1.0, &mut rng).unwrap().0,
                video_mixup(&a, &b, 1.0, &mut rng).unwrap(),
                video_cutmix(&a, &b, &mut rng).unwrap(),
                gaussian_noise(&a, 0.2, &mut rng).unwrap(),
            ]
        };
        let first = run(seed);
        for out in &first {
            prop_assert_eq!(out.dims(), a.dims());
        }
        prop_assert_eq!(first, run(seed));
    }
}

#[test]
fn unit_alpha_gives_uniform_lambda() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws: Vec<f64> = (0..10_000).map(|_| sample_lambda(1.0, &mut rng).unwrap()).collect();
    let d = common::ks_uniform(&draws);
    assert!(d < 0.02, "KS distance {d}");
}
