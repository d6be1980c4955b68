use nmrmos::audio::{decode_wav, encode_wav, AudioClip, SAMPLE_RATE};
use nmrmos::eval::{pearson, retrieval_mp, spearman};
use nmrmos::infer::{estimate_from_ratings, prefer};
use nmrmos::model::{attention_pool, Model, ModelConfig, MAX_RELATIVE};
use nmrmos::synth::{
    augment, degrade, snr_db, synth_clean, time_stretch, Augmentation, DegradationKind, DegradationSpec, RatedClip,
    LEVELS,
};
use nmrmos::train::pair_labels;
use nmrmos_autograd::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise_clip(seed: u64, len: usize) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AudioClip::new((0..len).map(|_| rng.random_range(-0.5f32..0.5)).collect(), SAMPLE_RATE).unwrap()
}

fn snr_of(clean: &[f32], degraded: &[f32]) -> f64 {
    let p_s: f64 = clean.iter().map(|&s| (s as f64).powi(2)).sum();
    let p_n: f64 = clean
        .iter()
        .zip(degraded)
        .map(|(&c, &d)| (d as f64 - c as f64).powi(2))
        .sum();
    10.0 * (p_s / p_n).log10()
}

/// Random rotation as a product of Givens rotations over all coordinate pairs.
fn rotate(vectors: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let dim = vectors[0].len();
    let mut out = vectors.to_vec();
    for a in 0..dim {
        for b in a + 1..dim {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (s, c) = theta.sin_cos();
            for v in &mut out {
                let (x, y) = (v[a], v[b]);
                v[a] = c * x - s * y;
                v[b] = s * x + c * y;
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pair_labels_are_antisymmetric(a in 1.0f64..=5.0, b in 1.0f64..=5.0) {
        let (y_ab, s_ab) = pair_labels(a, b);
        let (y_ba, s_ba) = pair_labels(b, a);
        prop_assert_eq!(s_ab, s_ba);
        prop_assert!(s_ab >= 0.0);
        prop_assert_eq!(y_ab[0] + y_ab[1], 1.0);
        if a != b {
            prop_assert_eq!(y_ab, [y_ba[1], y_ba[0]]);
        } else {
            prop_assert_eq!(y_ab, [0.0, 1.0]);
        }
    }

    #[test]
    fn augmentation_keeps_labels(seed in any::<u64>(), mos in 1.0f64..=5.0, kind in 0usize..3) {
        let kind = [Augmentation::Invert, Augmentation::Reverse, Augmentation::TimeStretch][kind];
        let rated = RatedClip {
            clip: noise_clip(seed, 4000),
            mos,
            system_id: "lowpass_L3".into(),
            utterance_id: "s001_lowpass_L3".into(),
        };
        let out = rated.augmented(kind, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(out.mos, mos);
        prop_assert_eq!(out.system_id, rated.system_id);
        prop_assert_eq!(out.utterance_id, rated.utterance_id);
    }

    #[test]
    fn invert_and_reverse_are_commuting_involutions(seed in any::<u64>(), len in 1usize..3000) {
        let clip = noise_clip(seed, len);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut apply = |c: &AudioClip, k| augment(c, k, &mut rng).unwrap();
        let inv = apply(&clip, Augmentation::Invert);
        let rev = apply(&clip, Augmentation::Reverse);
        prop_assert_eq!(&apply(&inv, Augmentation::Invert), &clip);
        prop_assert_eq!(&apply(&rev, Augmentation::Reverse), &clip);
        prop_assert_eq!(apply(&inv, Augmentation::Reverse), apply(&rev, Augmentation::Invert));
    }

    #[test]
    fn time_stretch_length(seed in any::<u64>(), len in 1usize..5000, alpha in 0.9f64..=1.1) {
        let out = time_stretch(&noise_clip(seed, len), alpha).unwrap();
        prop_assert_eq!(out.len(), ((len as f64 * alpha).round() as usize).max(1));
        prop_assert!(out.samples().iter().all(|s| s.is_finite()));
    }

    #[test]
    fn spearman_ignores_monotone_transforms(
        xs in prop::collection::vec(-10.0f64..10.0, 3..40),
        seed in any::<u64>(),
        shift in -5.0f64..5.0,
        gain in 0.1f64..10.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ys: Vec<f64> = xs.iter().map(|x| x + rng.random_range(-3.0..3.0)).collect();
        let Ok(base) = spearman(&xs, &ys) else { return Ok(()); };
        let transformed: Vec<f64> = xs.iter().map(|x| gain * x.powi(3) + shift).collect();
        let exp: Vec<f64> = ys.iter().map(|y| y.exp()).collect();
        prop_assert!((spearman(&transformed, &ys).unwrap() - base).abs() < 1e-12);
        prop_assert!((spearman(&xs, &exp).unwrap() - base).abs() < 1e-12);
        let reversed: Vec<f64> = xs.iter().map(|x| -x).collect();
        prop_assert!((spearman(&reversed, &ys).unwrap() + base).abs() < 1e-12);
    }

    #[test]
    fn pearson_is_bounded(xs in prop::collection::vec(-10.0f64..10.0, 2..30), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ys: Vec<f64> = xs.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        if let Ok(r) = pearson(&xs, &ys) {
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn retrieval_is_rotation_invariant(seed in any::<u64>(), n in 6usize..30, dim in 2usize..6, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
        let k = k.min(n - 1);
        let base = retrieval_mp(&emb, &labels, k).unwrap();
        let rotated = retrieval_mp(&rotate(&emb, &mut rng), &labels, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&base));
        prop_assert!((base - rotated).abs() < 1e-12, "{} vs {}", base, rotated);
    }

    #[test]
    fn attention_pool_is_a_convex_combination(seed in any::<u64>(), frames in 1usize..20, width in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..frames * width).map(|_| rng.random_range(-3.0..3.0)).collect();
        let x = Tensor::<f64>::from_f64(&[frames, width], &x).unwrap();
        let w: Vec<f64> = (0..width).map(|_| rng.random_range(-5.0..5.0)).collect();
        let (pooled, weights) = attention_pool(&x, &w, rng.random_range(-1.0..1.0)).unwrap();
        prop_assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(weights.iter().all(|&a| a >= 0.0));
        for c in 0..width {
            let col: Vec<f64> = (0..frames).map(|t| x.data()[t * width + c]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(pooled[c] >= lo - 1e-9 && pooled[c] <= hi + 1e-9);
        }
    }

    #[test]
    fn mos_estimate_is_clamped(ratings in prop::collection::vec(-10.0f64..10.0, 1..50)) {
        let e = estimate_from_ratings(ratings.clone()).unwrap();
        prop_assert!((1.0..=5.0).contains(&e.mos));
        prop_assert!(e.std_r >= 0.0);
        prop_assert_eq!(e.n, ratings.len());
    }

    #[test]
    fn wav_round_trip_within_quantization(seed in any::<u64>(), len in 1usize..4000) {
        let clip = noise_clip(seed, len);
        let back = decode_wav(&encode_wav(&clip)).unwrap();
        prop_assert_eq!(back.sample_rate(), SAMPLE_RATE);
        prop_assert_eq!(back.len(), len);
        for (a, b) in clip.samples().iter().zip(back.samples()) {
            prop_assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn additive_noise_hits_target_snr(seed in any::<u64>(), level in 0u8..LEVELS) {
        let clean = synth_clean(seed, 1.0).unwrap();
        let spec = DegradationSpec::new(DegradationKind::AdditiveNoise, level, seed ^ 0x5eed).unwrap();
        let noisy = degrade(&clean, &spec).unwrap();
        let measured = snr_of(clean.samples(), noisy.samples());
        prop_assert!((measured - snr_db(level)).abs() <= 0.5, "level {} measured {} dB", level, measured);
    }

    #[test]
    fn pair_outputs_are_normalized(seed in any::<u64>(), len in 200usize..1200) {
        let model = Model::<f64>::new(ModelConfig::reduced(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut wave = || -> Vec<f64> { (0..len).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (xi, xj) = (wave(), wave());
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let out = model.pair_graph(&mut g, &b, &xi, &xj).unwrap();
        let p = g.value(out.p).data().to_vec();
        let r = g.value(out.r).data()[0];
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(r > 0.0 && r < MAX_RELATIVE);
        for a in [out.attn_pref, out.attn_rel] {
            prop_assert!((g.value(a).data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn prefer_is_complementary(seed in any::<u64>()) {
        let model = Model::<f32>::new(ModelConfig::reduced(seed)).unwrap();
        let a = synth_clean(seed, 1.5).unwrap();
        let b = noise_clip(seed, 20_000);
        let ab = prefer(&model, &a, &b).unwrap();
        let ba = prefer(&model, &b, &a).unwrap();
        prop_assert_eq!(ab + ba, 1.0);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(prefer(&model, &a, &a).unwrap(), 0.5);
    }
}
