use std::f64::consts::PI;

use mcw2v_core::dsp::*;
use rustfft::num_complex::Complex64;
use proptest::prelude::*;

fn wave(samples: Vec<Vec<f64>>) -> MultiChannelWave {
    MultiChannelWave::new(samples, 16_000, "t").unwrap()
}

fn noise(n: usize, seed: u64) -> Vec<f64> {
    // Small LCG so the oracle test needs no extra dependencies.
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

/// Direct evaluation of the windowed, zero-padded DFT of one frame.
fn direct_dft(x: &[f64], start: usize, k: usize) -> Complex64 {
    let w = hann(400);
    (0..400)
        .map(|n| {
            let angle = -2.0 * PI * (k * n) as f64 / FFT_SIZE as f64;
            Complex64::from_polar(x[start + n] * w[n], angle)
        })
        .sum()
}

#[test]
fn stft_matches_direct_dft() {
    let x = noise(1200, 7);
    let y = noise(1200, 8);
    let s = stft(&wave(vec![x.clone(), y.clone()])).unwrap();
    assert_eq!(s.frames, 1 + (1200 - 400) / 160);
    let mut worst = 0.0f64;
    for (c, sig) in [&x, &y].into_iter().enumerate() {
        for t in 0..s.frames {
            for k in 0..NUM_BINS {
                let d = direct_dft(sig, t * 160, k);
                worst = worst.max((s.at(c, t, k) - d).norm());
            }
        }
    }
    assert!(worst <= 1e-6, "{worst}");
}

#[test]
fn frame_count_formula() {
    for n in [400, 559, 560, 16_000] {
        let s = stft(&wave(vec![vec![0.0; n], vec![0.0; n]])).unwrap();
        assert_eq!(s.frames, 1 + (n - 400) / 160);
    }
}

#[test]
fn identical_channels_give_unit_cosine() {
    let x = noise(2000, 3);
    let f = extract_features(&wave(vec![x.clone(), x])).unwrap();
    assert!(f.is_finite());
    for c in 0..2 {
        for t in 0..f.frames {
            let row = f.phase_row(c, t);
            assert!(row[..NUM_BINS].iter().all(|&v| v == 1.0));
            assert!(row[NUM_BINS..].iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn feature_dump_round_trips_through_bytes() {
    let x = noise(800, 1);
    let f = extract_features(&wave(vec![x.clone(), noise(800, 2)])).unwrap();
    let payload = feature_payload(&f);
    let header = DumpHeader::new(vec![f.channels, f.frames, f.dim()]);
    let mut buf = Vec::new();
    write_dump(&mut buf, &header, &payload).unwrap();
    assert_eq!(&buf[..8], b"MCFEAT01");
    let (h, p) = read_dump(&mut buf.as_slice()).unwrap();
    assert_eq!(h, header);
    assert_eq!(p, payload);
    assert_eq!(h.shape, vec![2, 3, FEATURE_DIM]);
}

#[test]
fn wav_round_trip_is_pcm16() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.wav");
    let x: Vec<f64> = noise(1000, 4).into_iter().map(|v| 0.5 * v).collect();
    let w = wave(vec![x.clone(), x.iter().map(|v| -v).collect()]);
    write_wav(&path, &w).unwrap();
    let back = read_wav(&path).unwrap();
    assert_eq!(back.channels(), 2);
    assert_eq!(back.sample_rate_hz, 16_000);
    for (a, b) in back.samples[0].iter().zip(&x) {
        assert!((a - b).abs() <= 1.0 / 32768.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ipd_lies_on_unit_circle(seed in 0u64..10_000, gain in 0.01f64..1.0, delay in 0usize..8) {
        let x = noise(1000, seed);
        let y: Vec<f64> = (0..1000).map(|n| gain * if n >= delay { x[n - delay] } else { 0.0 }).collect();
        let f = extract_features(&wave(vec![x, y])).unwrap();
        for c in 0..2 {
            for t in 0..f.frames {
                let row = f.phase_row(c, t);
                for k in 0..NUM_BINS {
                    let (co, si) = (row[k] as f64, row[NUM_BINS + k] as f64);
                    prop_assert!((co * co + si * si - 1.0).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn log_power_never_below_floor(seed in 0u64..10_000, scale in 0.0f64..2.0) {
        let x: Vec<f64> = noise(600, seed).into_iter().map(|v| v * scale).collect();
        let f = extract_features(&wave(vec![x.clone(), x])).unwrap();
        let floor = (POWER_FLOOR.ln() as f32) - 1e-4;
        prop_assert!(f.amplitude.iter().all(|&v| v >= floor && v.is_finite()));
    }
}
