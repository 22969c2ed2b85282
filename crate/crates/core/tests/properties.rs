use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use freqmoe::io;
use freqmoe::moe::{band_features, gate_forward, sparsity_loss, top_k_experts, GateParams};
use freqmoe::nn::{Fno, FnoConfig, Routing};
use freqmoe::spectral::{extract_band, forward_rfft2, BandId, BandLayout};
use freqmoe::train::{lr_at, TrainConfig};
use freqmoe::upcycle::{upcycle, verify_upcycle, UpcycleSpec};
use freqmoe::Tensor;

fn field(channels: usize, size: usize, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = channels * size * size;
    Tensor::from_vec(
        &[channels, size, size],
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn top_k_is_invariant_to_temperature(seed in 0u64..10_000, n in 1usize..16, h in 1usize..6, t1 in 0.05f64..5.0, t2 in 0.05f64..5.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut g1 = GateParams::new(n, h, t1).unwrap();
        g1.weights.iter_mut().for_each(|w| *w = r.gen_range(-1.0..1.0));
        let mut g2 = g1.clone();
        g2.temperature = t2;
        let f: Vec<f64> = (0..h).map(|_| r.gen_range(0.0..2.0)).collect();
        let a: Vec<f64> = (0..n).map(|j| gate_forward(&f, &g1, j)).collect();
        let b: Vec<f64> = (0..n).map(|j| gate_forward(&f, &g2, j)).collect();
        // Distinct logits, so that ties cannot reorder experts.
        let logits: Vec<f64> = (0..n).map(|j| g1.logit(j, &f) * t1).collect();
        let mut sorted = logits.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 1e-9));
        for k in 0..=n {
            prop_assert_eq!(top_k_experts(&a, k).unwrap(), top_k_experts(&b, k).unwrap());
        }
    }

    #[test]
    fn gates_and_sparsity_stay_in_range(seed in 0u64..10_000, n in 1usize..64, batch in 1usize..5) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let gates: Vec<Vec<f64>> = (0..batch)
            .map(|_| (0..n).map(|_| freqmoe::moe::sigmoid(r.gen_range(-20.0..20.0))).collect())
            .collect();
        let l = sparsity_loss(&gates);
        prop_assert!(l > 0.0 && l < n as f64);
        for g in gates.iter().flatten() {
            prop_assert!(*g > 0.0 && *g < 1.0);
        }
    }

    #[test]
    fn band_features_are_scale_covariant(seed in 0u64..10_000, scale in 0.1f64..10.0) {
        let layout = BandLayout::new((2, 2), (2, 2)).unwrap();
        let x = field(3, 16, seed);
        let mut y = x.clone();
        y.scale(scale);
        let bx = extract_band(&forward_rfft2(&x).unwrap(), BandId(1, 1), &layout).unwrap();
        let by = extract_band(&forward_rfft2(&y).unwrap(), BandId(1, 1), &layout).unwrap();
        for (a, b) in band_features(&bx).iter().zip(band_features(&by)) {
            prop_assert!((a * scale - b).abs() <= 1e-9 * b.abs().max(1.0));
            prop_assert!(*a >= 0.0);
        }
    }

    #[test]
    fn lr_schedule_is_bounded(step in 0usize..10_000, epoch in 0.0f64..120.0) {
        let cfg = TrainConfig::default();
        let lr = lr_at(step, epoch, &cfg);
        prop_assert!(lr >= 0.0 && lr <= cfg.lr);
        if step >= cfg.warmup_steps {
            prop_assert!(lr >= cfg.lr * cfg.min_lr_ratio);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn masked_upcycle_matches_any_base(seed in 0u64..1000, width in 2usize..6, p in 1usize..3, j in 2usize..4, layers in 1usize..3) {
        let width = 2 * width;
        let cfg = FnoConfig { width, layers, modes: (p, p), grid_size: 16, ..FnoConfig::default() };
        let base = Fno::new(cfg, seed).unwrap();
        let spec = UpcycleSpec { rank: 1 + seed as usize % (width / 2), ..UpcycleSpec::full(BandLayout::new((p, p), (j, j)).unwrap(), seed) };
        let moe = upcycle(&base, &spec).unwrap();
        let report = verify_upcycle(&base, &moe, 4, seed).unwrap();
        prop_assert_eq!(report.max_deviation, 0.0);
        prop_assert_eq!(report.max_delta_norm(), 0.0);
        let x = field(1, 16, seed + 1);
        prop_assert_eq!(moe.predict(&x, Routing::TopK(0)).unwrap(), base.predict(&x, Routing::Train).unwrap());
    }

    #[test]
    fn checkpoints_round_trip(seed in 0u64..1000, width in 1usize..4) {
        let cfg = FnoConfig { width: 2 * width, layers: 2, modes: (2, 2), grid_size: 16, ..FnoConfig::default() };
        let base = Fno::new(cfg, seed).unwrap();
        let mut moe = upcycle(&base, &UpcycleSpec { rank: 1, ..UpcycleSpec::full(BandLayout::new((2, 2), (2, 2)).unwrap(), seed) }).unwrap();
        moe.layers[0].spectral.experts[0].b[0] = Complex64::new(seed as f64, -1.5);
        let ck = io::ModelCheckpoint::new(io::Model::FreqMoe(moe.clone()), seed);
        let bytes = io::checkpoint_to_bytes(&ck).unwrap();
        let back = io::checkpoint_from_bytes(&bytes).unwrap();
        prop_assert_eq!(io::checkpoint_to_bytes(&back).unwrap(), bytes);
        prop_assert!(back.into_moe().unwrap() == moe);
    }
}
