use mcw2v_core::corpus::*;
use mcw2v_core::dsp::read_wav;
use proptest::prelude::*;

fn xcorr(a: &[f64], b: &[f64], lag: i64) -> f64 {
    (0..a.len() as i64)
        .filter_map(|n| {
            let m = n + lag;
            (m >= 0 && (m as usize) < b.len()).then(|| a[n as usize] * b[m as usize])
        })
        .sum()
}

/// Lag of the cross-correlation peak, refined by a parabola through the
/// three samples around it.
fn estimate_delay(a: &[f64], b: &[f64], max_lag: i64) -> f64 {
    let (best, _) = (-max_lag..=max_lag)
        .map(|l| (l, xcorr(a, b, l)))
        .fold((0, f64::MIN), |acc, x| if x.1 > acc.1 { x } else { acc });
    let (ym, y0, yp) = (xcorr(a, b, best - 1), xcorr(a, b, best), xcorr(a, b, best + 1));
    let denom = ym - 2.0 * y0 + yp;
    best as f64 + if denom != 0.0 { 0.5 * (ym - yp) / denom } else { 0.0 }
}

#[test]
fn corpus_files_match_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::default();
    let (train, test) = build_corpus(&cfg, 12, 5, 3, dir.path()).unwrap();
    assert_eq!((train.len(), test.len()), (12, 5));
    let reloaded = Manifest::load(&dir.path().join("train.jsonl")).unwrap();
    assert_eq!(reloaded.entries, train.entries);
    for e in train.entries.iter().chain(&test.entries) {
        let w = read_wav(&train.wav_path(e)).unwrap();
        assert_eq!(w.channels(), 2);
        assert!((w.duration_s() - e.dur).abs() < 1e-3);
        assert!(w.peak() <= 1.0);
        let tokens = text_to_tokens(&e.text, cfg.vocab_size).unwrap();
        assert!((cfg.min_tokens..=cfg.max_tokens).contains(&tokens.len()));
        assert_eq!(tokens_to_text(&tokens), e.text);
    }
    let ids: Vec<&str> = test.entries.iter().map(|e| e.id.as_str()).collect();
    assert!(ids.iter().all(|id| id.starts_with("test-")));
}

#[test]
fn same_seed_same_corpus() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = SynthConfig::default();
    let (ma, _) = build_corpus(&cfg, 4, 1, 9, a.path()).unwrap();
    let (mb, _) = build_corpus(&cfg, 4, 1, 9, b.path()).unwrap();
    assert_eq!(ma.entries, mb.entries);
    for (x, y) in ma.entries.iter().zip(&mb.entries) {
        assert_eq!(read_wav(&ma.wav_path(x)).unwrap().samples, read_wav(&mb.wav_path(y)).unwrap().samples);
    }
}

#[test]
fn five_tokens_last_six_tenths_of_a_second() {
    let w = synth_utterance(&[0, 1, 2, 3, 4], &SynthConfig::default(), 1, "x").unwrap();
    assert_eq!(w.len(), 9600);
}

#[test]
fn clean_undelayed_channels_are_identical() {
    let cfg = SynthConfig { clean: true, ..Default::default() };
    let ch = synth_with_geometry(&[5, 9], &cfg, Geometry { delay: 0.0, snr_db: None }, 3).unwrap();
    assert_eq!(ch[0], ch[1]);
    assert!(synth_with_geometry(&[16], &cfg, Geometry { delay: 0.0, snr_db: None }, 3).is_err());
}

#[test]
fn manifest_rejects_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("m.jsonl"),
        "{\"id\":\"a\",\"wav\":\"nope.wav\",\"text\":\"ab\",\"dur\":1.0}\n",
    )
    .unwrap();
    assert!(Manifest::load(&dir.path().join("m.jsonl")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn interchannel_delay_is_recoverable(delay in -4.0f64..4.0, seed in 0u64..1000) {
        let cfg = SynthConfig { clean: true, ..Default::default() };
        let tokens = [seed as usize % 16, 3, 11];
        let geo = Geometry { delay, snr_db: None };
        let ch = synth_with_geometry(&tokens, &cfg, geo, seed).unwrap();
        let est = estimate_delay(&ch[0], &ch[1], 8);
        prop_assert!((est - delay).abs() <= 0.5, "estimated {} for {}", est, delay);
        prop_assert!(ch.iter().flatten().all(|x| x.abs() <= 1.0));
    }

    #[test]
    fn noisy_waves_stay_in_range(seed in 0u64..1000) {
        let w = synth_utterance(&[1, 2, 3, 4], &SynthConfig::default(), seed, "x").unwrap();
        prop_assert!(w.peak() <= 1.0);
        prop_assert_eq!(w.channels(), 2);
    }

    #[test]
    fn text_round_trips(tokens in prop::collection::vec(0usize..16, 0..20)) {
        prop_assert_eq!(text_to_tokens(&tokens_to_text(&tokens), 16).unwrap(), tokens);
    }
}
