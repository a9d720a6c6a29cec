use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikedepth::spike::*;

fn fire(clip: &IntensityClip, theta: f64, reset_mode: ResetMode) -> SpikeVoxel {
    integrate_and_fire(clip, &FiringConfig { theta, reset_mode }).unwrap()
}

fn random_clip(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> IntensityClip {
    let data = (0..t * h * w).map(|_| rng.random::<f64>()).collect();
    IntensityClip::new(t, h, w, data, 1.0).unwrap()
}

// Independent scalar accumulator.
fn oracle_count(series: &[f64], theta: f64, subtract: bool) -> u32 {
    let (mut v, mut n) = (0.0, 0);
    for &i in series {
        v += i;
        if v >= theta {
            n += 1;
            v = if subtract { v - theta } else { 0.0 };
        }
    }
    n
}

#[test]
fn counts_match_scalar_accumulator() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let clip = random_clip(&mut rng, 37, 3, 4);
        for (mode, subtract) in [(ResetMode::ResetToZero, false), (ResetMode::SubtractThreshold, true)] {
            let counts = fire(&clip, 1.3, mode).counts();
            for p in 0..12 {
                let series: Vec<f64> = (0..37).map(|t| clip.data[t * 12 + p]).collect();
                assert_eq!(counts[p], oracle_count(&series, 1.3, subtract));
            }
        }
    }
}

#[test]
fn brighter_clips_never_fire_less() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let a = random_clip(&mut rng, 100, 4, 5);
        let b_data = a.data.iter().map(|&x| (x + rng.random::<f64>() * (1.0 - x)).min(1.0)).collect();
        let b = IntensityClip::new(100, 4, 5, b_data, 1.0).unwrap();
        for mode in [ResetMode::ResetToZero, ResetMode::SubtractThreshold] {
            let (ca, cb) = (fire(&a, 1.0, mode).counts(), fire(&b, 1.0, mode).counts());
            assert!(ca.iter().zip(&cb).all(|(x, y)| y >= x));
        }
    }
}

#[test]
fn same_clip_same_voxel() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let clip = random_clip(&mut rng, 50, 6, 7);
    assert_eq!(fire(&clip, 1.0, ResetMode::ResetToZero), fire(&clip, 1.0, ResetMode::ResetToZero));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn spike_count_bound(seed in any::<u64>(), theta in 0.3f64..2.5, t in 1usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clip = random_clip(&mut rng, t, 2, 3);
        for mode in [ResetMode::ResetToZero, ResetMode::SubtractThreshold] {
            let counts = fire(&clip, theta, mode).counts();
            for p in 0..6 {
                let total: f64 = (0..t).map(|s| clip.data[s * 6 + p]).sum();
                prop_assert!(counts[p] as f64 <= (total / theta).floor() + 1.0);
            }
        }
    }

    // Dyadic intensities and thresholds keep every partial sum exact. One
    // spike per step at most, so the identity needs I <= theta.
    #[test]
    fn subtract_mode_count_is_exact_for_constant_input(k in 0u32..=64, extra in 0u32..=64, t in 1usize..=100) {
        let (level, theta) = (k as f64 / 64.0, (k.max(1) + extra) as f64 / 64.0);
        let clip = IntensityClip::constant(t, 2, 2, level).unwrap();
        let expected = (t as f64 * level / theta).floor() as u32;
        prop_assert!(fire(&clip, theta, ResetMode::SubtractThreshold).counts().iter().all(|&c| c == expected));
    }

    #[test]
    fn pack_round_trip(t in 1usize..12, h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bits: Vec<u8> = (0..t * h * w).map(|_| rng.random_range(0..2)).collect();
        let v = pack_voxel(t, h, w, &bits).unwrap();
        prop_assert_eq!(v.packed().len(), (t * h * w).div_ceil(8));
        prop_assert_eq!(unpack_voxel(&v), bits);
    }
}

#[test]
fn window_chunking_fixtures() {
    let v = SpikeVoxel::zeros(100, 2, 2);
    for (n, s) in [(24, 4), (100, 1), (16, 6)] {
        let set = chunk_windows(&v, n).unwrap();
        assert_eq!(set.count(), s);
        assert!(set.sequences.iter().all(|q| q.frames() == n));
    }
    assert!(chunk_windows(&v, 0).is_err());
    assert!(chunk_windows(&v, 101).is_err());
}

#[test]
fn alternating_train_spectrum() {
    let bits: Vec<u8> = (0..100).map(|t| (t % 2 == 0) as u8).collect();
    let v = pack_voxel(100, 1, 1, &bits).unwrap();
    let f = temporal_frequency_features(&v, 51).unwrap();
    let d = f.data();
    assert!((d[0] - 0.5).abs() < 1e-12);
    assert!((d[50] - 0.5).abs() < 1e-12);
    assert!(d[1..50].iter().all(|x| x.abs() < 1e-12));
    assert!(temporal_frequency_features(&v, 52).is_err());
}

#[test]
fn rate_map_fixtures() {
    let ones = pack_voxel(10, 2, 2, &[1; 40]).unwrap();
    assert!(rate_map(&ones).data.iter().all(|&r| r == 1.0));
    assert!(rate_map(&SpikeVoxel::zeros(10, 2, 2)).data.iter().all(|&r| r == 0.0));
}
