use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfrestore_core::degrade::*;
use tfrestore_core::metrics::lsd;
use tfrestore_core::sfi_stft::{rms, stft, StftParams, Waveform};

fn tone(freq: f64, sr: u32, len: usize, amp: f64) -> Waveform {
    Waveform::new((0..len).map(|i| amp * (2.0 * PI * freq * i as f64 / sr as f64).sin()).collect(), sr)
}

fn noise(seed: u64, len: usize, sr: u32) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), sr)
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

fn speechlike(seed: u64, len: usize, sr: u32) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0: f64 = rng.gen_range(100.0..200.0);
    let samples = (0..len)
        .map(|i| {
            let t = i as f64 / sr as f64;
            let env = 0.5 + 0.5 * (2.0 * PI * 3.0 * t).sin();
            env * (1..8).map(|h| (2.0 * PI * f0 * h as f64 * t).sin() / h as f64).sum::<f64>() * 0.3
        })
        .collect();
    Waveform::new(samples, sr)
}

#[test]
fn rir_identity_and_delay() {
    let s = noise(1, 2000, 16000);
    let mut imp = vec![0.0; 300];
    imp[0] = 1.0;
    let (wet, target) = apply_rir(&s, &Waveform::new(imp, 16000)).unwrap();
    for ((a, b), c) in wet.samples.iter().zip(&target.samples).zip(&s.samples) {
        assert!((a - c).abs() < 1e-12 && (b - c).abs() < 1e-12);
    }
    let mut delayed = vec![0.0; 300];
    delayed[137] = 1.0;
    let (wet, target) = apply_rir(&s, &Waveform::new(delayed, 16000)).unwrap();
    // cross-correlation between wet and target peaks at lag 0
    let xcorr = |lag: isize| -> f64 {
        (0..s.len() as isize)
            .filter_map(|i| {
                let j = i + lag;
                (j >= 0 && (j as usize) < s.len()).then(|| wet.samples[i as usize] * target.samples[j as usize])
            })
            .sum()
    };
    let best = (-50..=50).max_by(|&a, &b| xcorr(a).partial_cmp(&xcorr(b)).unwrap()).unwrap();
    assert_eq!(best, 0);
}

#[test]
fn rir_target_keeps_only_the_direct_tap() {
    let sr = 16000;
    let s = noise(2, 1500, sr);
    let mut rir = vec![0.0; 800];
    rir[10] = 1.0;
    rir[10 + 400] = 0.6; // echo 25 ms later
    let (wet, target) = apply_rir(&s, &Waveform::new(rir, sr)).unwrap();
    for n in 0..s.len() {
        let echo = if n >= 400 { 0.6 * s.samples[n - 400] } else { 0.0 };
        assert!((wet.samples[n] - (s.samples[n] + echo)).abs() < 1e-10);
        assert!((target.samples[n] - s.samples[n]).abs() < 1e-10);
    }
    assert!(matches!(apply_rir(&s, &Waveform::new(vec![0.0; 10], sr)), Err(DegradeError::EmptyRir)));
}

#[test]
fn noise_mixing_hits_requested_snr() {
    let s = speechlike(3, 16000, 16000);
    let n = noise(4, 7000, 16000); // shorter than the signal: looped
    for snr in [0.0, 7.5, 20.0] {
        let y = mix_noise(&s, &n, snr).unwrap();
        let resid: Vec<f64> = y.samples.iter().zip(&s.samples).map(|(a, b)| a - b).collect();
        let achieved = 10.0 * (power(&s.samples) / power(&resid)).log10();
        assert!((achieved - snr).abs() < 0.01, "{achieved} vs {snr}");
    }
    let y = mix_noise(&s, &n, 20.0).unwrap();
    let resid: Vec<f64> = y.samples.iter().zip(&s.samples).map(|(a, b)| a - b).collect();
    assert!((rms(&resid) - s.rms() / 10.0).abs() < 1e-9);
    assert!(matches!(mix_noise(&s, &Waveform::zeros(10, 16000), 5.0), Err(DegradeError::SilentNoise)));
}

#[test]
fn independent_noise_sources_combine_by_power() {
    let s = speechlike(5, 32000, 16000);
    let n1 = noise(6, 32000, 16000);
    let n2 = noise(7, 32000, 16000);
    let g1 = noise_gain(&s.samples, &n1.samples, 10.0).unwrap();
    let g2 = noise_gain(&s.samples, &n2.samples, 10.0).unwrap();
    let total: Vec<f64> = n1.samples.iter().zip(&n2.samples).map(|(a, b)| g1 * a + g2 * b).collect();
    let snr = 10.0 * (power(&s.samples) / power(&total)).log10();
    // 10 log10(1 / 0.2), up to the small correlation between the two draws
    assert!((snr - 6.99).abs() < 0.05, "combined {snr}");
}

/// Welch PSD slope in dB per octave between `lo` and `hi` Hz.
fn psd_slope(x: &[f64], sr: u32, lo: f64, hi: f64) -> f64 {
    let n = 1024;
    let win: Vec<f64> = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();
    let mut psd = vec![0.0; n / 2 + 1];
    let mut segs = 0;
    let mut start = 0;
    while start + n <= x.len() {
        for (k, p) in psd.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..n {
                let a = 2.0 * PI * k as f64 * i as f64 / n as f64;
                re += x[start + i] * win[i] * a.cos();
                im -= x[start + i] * win[i] * a.sin();
            }
            *p += re * re + im * im;
        }
        segs += 1;
        start += n / 2;
    }
    let pts: Vec<(f64, f64)> = (1..=n / 2)
        .filter_map(|k| {
            let f = k as f64 * sr as f64 / n as f64;
            (f >= lo && f <= hi).then(|| (f.log2(), 10.0 * (psd[k] / segs as f64).log10()))
        })
        .collect();
    let m = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mx, my) = (sx / m, sy / m);
    let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    num / den
}

#[test]
fn colored_noise_spectral_slopes() {
    let sr = 16000;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let white = colored_noise(16000 * 8, 0.0, sr, &mut rng);
    assert!((white.rms() - 1.0).abs() < 1e-12);
    let s = psd_slope(&white.samples, sr, 100.0, 7000.0);
    assert!(s.abs() < 0.1, "white slope {s} dB/oct");
    let pink = colored_noise(16000 * 8, 1.0, sr, &mut rng);
    let s = psd_slope(&pink.samples, sr, 100.0, 4000.0);
    assert!((s + 3.0).abs() < 0.5, "pink slope {s} dB/oct");
    let a = colored_noise(5000, 1.2, sr, &mut ChaCha8Rng::seed_from_u64(9));
    let b = colored_noise(5000, 1.2, sr, &mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!(a, b);
}

fn tone_gain_db(input: &Waveform, output: &Waveform) -> f64 {
    let n = input.len();
    let (a, b) = (&input.samples[n / 4..3 * n / 4], &output.samples[n / 4..3 * n / 4]);
    20.0 * (rms(b) / rms(a)).log10()
}

#[test]
fn occlusion_filter_is_zero_phase_with_expected_gains() {
    let sr = 16000;
    let mut imp = vec![0.0; 401];
    imp[200] = 1.0;
    let y = occlusion_bpf(&Waveform::new(imp, sr), 1000.0, 1400.0, 0.2, 1.0, 61).unwrap();
    let asym = (0..200).map(|i| (y.samples[200 - i] - y.samples[200 + i]).abs()).fold(0.0, f64::max);
    assert!(asym <= 1e-9, "asymmetry {asym}");

    let low = tone(300.0, sr, 16000, 0.5);
    let g = tone_gain_db(&low, &occlusion_bpf(&low, 1000.0, 1400.0, 0.2, 1.0, 61).unwrap());
    assert!(g.abs() < 0.5, "passband {g} dB");
    let high = tone(5000.0, sr, 16000, 0.5);
    let g = tone_gain_db(&high, &occlusion_bpf(&high, 1000.0, 1400.0, 0.2, 1.0, 61).unwrap());
    let want = 2.0 * 20.0 * 0.2f64.log10();
    assert!((g - want).abs() < 2.0, "stopband {g} dB vs {want}");
    assert!(matches!(occlusion_bpf(&low, 1500.0, 1400.0, 0.2, 1.0, 31), Err(DegradeError::InvalidBand(_))));
    assert!(matches!(occlusion_bpf(&low, 1000.0, 1400.0, 0.2, 1.0, 32), Err(DegradeError::InvalidBand(_))));
}

#[test]
fn clipping_thresholds() {
    let s = tone(100.0, 16000, 1600, 1.0);
    assert_eq!(clip(&s, 0.0), s);
    let c = clip(&s, -6.0);
    let want = 10f64.powf(-6.0 / 20.0);
    assert_eq!(c.peak(), s.peak() * want);
    assert!((want - 0.5012).abs() < 1e-4);
    let quiet = Waveform::new(vec![0.1, -0.2, 0.05], 16000);
    let peaky = Waveform::new(vec![0.1, -0.2, 0.05, 1.0], 16000);
    let out = clip(&peaky, -3.0);
    assert_eq!(&out.samples[..3], &quiet.samples[..]);
}

#[test]
fn digital_effects() {
    let dc = Waveform::new(vec![0.3; 100], 16000);
    assert_eq!(crystalizer(&dc, 3.0), dc);
    let s = noise(10, 500, 16000);
    let crushed = bitcrush(&s, 1.0);
    assert!(crushed.samples.iter().all(|v| [-1.0, 0.0, 1.0].contains(v)));
    let crushed = bitcrush(&s, 3.0);
    assert!(crushed.samples.iter().all(|v| (v * 4.0).fract() == 0.0));

    // flanger on an impulse: direct half plus an interpolated delayed half
    let sr = 16000;
    let n0 = 50;
    let mut x = vec![0.0; 400];
    x[n0] = 1.0;
    let y = flanger(&Waveform::new(x.clone(), sr), 4.0);
    for n in 0..x.len() {
        let pos = n as f64 - flanger_delay(n, 4.0, sr);
        let delayed = if (pos - n0 as f64).abs() < 1.0 { 1.0 - (pos - n0 as f64).abs() } else { 0.0 };
        let want = 0.5 * x[n] + 0.5 * delayed;
        assert!((y.samples[n] - want).abs() < 1e-12, "sample {n}");
    }
    assert_eq!(y.samples[n0], 0.5);
    let echo: f64 = y.samples[n0 + 1..].iter().sum();
    assert!(echo > 0.3, "delayed copy energy {echo}");
}

#[test]
fn external_codec_failure_and_fallback() {
    let s = speechlike(11, 4000, 16000);
    let mut stage = DegradeConfig::training().codec;
    stage.backend = CodecBackend::External {
        mp3_encode: "definitely-not-an-encoder {in} {out}".into(),
        mp3_decode: "definitely-not-a-decoder {in} {out}".into(),
        ogg_encode: "false".into(),
        ogg_decode: "false".into(),
        fallback_to_surrogate: false,
    };
    let choice = CodecChoice::Mp3 { kbps: 8.0 };
    assert!(matches!(codec_stage(&s, &choice, &stage), Err(DegradeError::ExternalToolFailed(_))));
    if let CodecBackend::External { fallback_to_surrogate, .. } = &mut stage.backend {
        *fallback_to_surrogate = true;
    }
    let (out, how) = codec_stage(&s, &choice, &stage).unwrap();
    assert_eq!(how, CodecRealization::Fallback);
    assert_eq!(out, codec_surrogate(&s, 8.0, &stage));

    // a copy "codec" round-trips through the temp files
    stage.backend = CodecBackend::External {
        mp3_encode: "cp {in} {out}".into(),
        mp3_decode: "cp {in} {out}".into(),
        ogg_encode: "cp {in} {out}".into(),
        ogg_decode: "cp {in} {out}".into(),
        fallback_to_surrogate: false,
    };
    let (out, how) = codec_stage(&s, &choice, &stage).unwrap();
    assert_eq!(how, CodecRealization::External);
    for (a, b) in out.samples.iter().zip(&s.samples) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn codec_surrogate_is_deterministic() {
    let s = speechlike(12, 8000, 16000);
    let stage = DegradeConfig::training().codec;
    assert_eq!(codec_surrogate(&s, 6.0, &stage), codec_surrogate(&s, 6.0, &stage));
}

#[test]
fn codec_surrogate_quality_rises_with_bit_rate() {
    let s = noise(17, 16000, 16000);
    let stage = DegradeConfig::training().codec;
    let dist: Vec<f64> = [4.0, 8.0, 12.0, 16.0].iter().map(|&k| lsd(&codec_surrogate(&s, k, &stage), &s).unwrap()).collect();
    for w in dist.windows(2) {
        assert!(w[1] < w[0], "{dist:?}");
    }
}

#[test]
fn spectral_masks() {
    let sr = 16000;
    let p = StftParams::for_rate(sr).unwrap();
    let s = noise(13, 16000, sr);
    let same = spec_mask(&s, &[(5, 0)], &[], &p).unwrap();
    assert_eq!(same, s);

    let (t0, t1) = (10usize, 20usize);
    let y = spec_mask(&s, &[], &[(t0, t1 - t0 + 1)], &p).unwrap();
    let span = &y.samples[t0 * p.hop..t1 * p.hop];
    let orig = &s.samples[t0 * p.hop..t1 * p.hop];
    let db = 10.0 * (power(span) / power(orig)).log10();
    assert!(db <= -40.0, "masked span at {db} dB");

    // a masked spectrogram is not a consistent STFT, so re-analysis leaks window
    // sidelobes back into the band; the band center still drops by over 30 dB
    let y = spec_mask(&s, &[(100, 10)], &[], &p).unwrap();
    let re = stft(&y, &p).unwrap();
    let before = stft(&s, &p).unwrap();
    for k in [104usize, 105] {
        let (mut after_e, mut before_e) = (0.0, 0.0);
        for t in 2..re.n_frames - 2 {
            after_e += re.magnitude(k, t).powi(2);
            before_e += before.magnitude(k, t).powi(2);
        }
        let db = 10.0 * (after_e / before_e).log10();
        assert!(db <= -30.0, "bin {k} at {db} dB");
    }
    let outside = (2..re.n_frames - 2).map(|t| re.magnitude(120, t) / before.magnitude(120, t)).sum::<f64>() / (re.n_frames - 4) as f64;
    assert!((outside - 1.0).abs() < 0.05);
}

fn assets(sr: u32) -> DegradeAssets {
    let mut rir = vec![0.0; sr as usize / 4];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    rir[30] = 1.0;
    for (i, v) in rir.iter_mut().enumerate().skip(31) {
        *v = rng.gen_range(-0.3..0.3) * (-(i as f64) / (0.05 * sr as f64)).exp();
    }
    DegradeAssets {
        rirs: vec![Waveform::new(rir, sr)],
        noises: vec![noise(20, sr as usize / 2, sr), colored_noise(sr as usize, 2.0, sr, &mut rng)],
    }
}

#[test]
fn passthrough_returns_the_leveled_clean_signal() {
    let clean = speechlike(14, 48000, 48000);
    let cfg = DegradeConfig::passthrough(48000);
    let out = simulate(&clean, &DegradeAssets::default(), &cfg, 3).unwrap();
    assert_eq!(out.input, out.target);
    let gain = out.input.rms() / clean.rms();
    for (a, b) in out.input.samples.iter().zip(&clean.samples) {
        assert!((a - gain * b).abs() < 1e-12);
    }
    let level = 20.0 * out.input.rms().log10();
    assert!((level - out.recipe.level_dbfs).abs() < 1e-9);
}

#[test]
fn simulate_is_deterministic_and_replayable() {
    let sr = 48000;
    let clean = speechlike(15, sr as usize, sr);
    let a = assets(sr);
    let cfg = DegradeConfig::training();
    for seed in [1u64, 2, 3] {
        let x = simulate(&clean, &a, &cfg, seed).unwrap();
        let y = simulate(&clean, &a, &cfg, seed).unwrap();
        assert_eq!(x, y);
        let json = serde_json::to_string(&x.recipe).unwrap();
        let recipe: DegradeRecipe = serde_json::from_str(&json).unwrap();
        let z = apply_recipe(&clean, &a, &cfg, &recipe).unwrap();
        assert_eq!(z.input, x.input);
        assert_eq!(z.target, x.target);
        assert_eq!(x.input.sample_rate, x.recipe.input_rate);
        assert_eq!(x.target.sample_rate, x.recipe.target_rate);
        assert!(x.input.samples.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn reverberant_input_stays_aligned_with_target() {
    let sr = 16000;
    // broadband clean signal so the correlation peak is sharp
    let clean = noise(16, sr as usize, sr);
    let a = assets(sr);
    let mut cfg = DegradeConfig::passthrough(sr);
    cfg.rir_prob = 1.0;
    let out = simulate(&clean, &a, &cfg, 5).unwrap();
    assert!(out.recipe.rir.is_some());
    let xcorr = |lag: isize| -> f64 {
        (0..clean.len() as isize)
            .filter_map(|i| {
                let j = i + lag;
                (j >= 0 && (j as usize) < clean.len()).then(|| out.input.samples[i as usize] * out.target.samples[j as usize])
            })
            .sum()
    };
    let best = (-40..=40).max_by(|&p, &q| xcorr(p).partial_cmp(&xcorr(q)).unwrap()).unwrap();
    assert_eq!(best, 0);
}

#[test]
fn stage_frequencies_match_configured_probabilities() {
    let cfg = DegradeConfig::training();
    let a = assets(16000);
    let n = 1000;
    let mut counts = [0usize; 9];
    let mut rate8k = 0;
    for seed in 0..n {
        let r = sample_recipe(&cfg, &a, 48000, 48000, seed as u64).unwrap();
        let flags = [
            r.rir.is_some(),
            r.sample_noise.is_some(),
            r.colored_noise.is_some(),
            r.bpf.is_some(),
            r.clip_level_db.is_some(),
            r.crystalizer_intensity.is_some(),
            r.flanger_depth_ms.is_some(),
            r.crusher_bits.is_some(),
            r.codec.is_some(),
        ];
        for (c, f) in counts.iter_mut().zip(flags) {
            *c += f as usize;
        }
        rate8k += (r.input_rate == 8000) as usize;
        if let Some(b) = &r.bpf {
            assert!(b.taps % 2 == 1 && (31..=61).contains(&b.taps));
            assert!(b.f2_hz - b.f1_hz >= 200.0 && b.f2_hz - b.f1_hz <= 500.0);
        }
        assert!((-35.0..=-15.0).contains(&r.level_dbfs));
        assert!(r.freq_masks.len() <= 3 && r.time_masks.len() <= 2);
    }
    let probs = [0.5, 1.0, 1.0, 0.5, 0.5, 0.15, 0.05, 0.10, 0.30];
    for (c, p) in counts.iter().zip(probs) {
        let f = *c as f64 / n as f64;
        assert!((f - p).abs() <= 0.05, "frequency {f} vs {p}");
    }
    assert!((rate8k as f64 / n as f64 - 0.25).abs() <= 0.05);
}

#[test]
fn config_validation_and_serde() {
    let mut cfg = DegradeConfig::training();
    cfg.clip.prob = 1.5;
    assert!(matches!(cfg.validate(), Err(DegradeError::InvalidConfig(_))));
    let mut cfg = DegradeConfig::training();
    cfg.downsample_rates = vec![(8000, 0.5), (16000, 0.4)];
    assert!(cfg.validate().is_err());
    for cfg in [DegradeConfig::training(), DegradeConfig::adversarial(), DegradeConfig::evaluation()] {
        cfg.validate().unwrap();
        let back: DegradeConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}

#[test]
fn corpus_simulation_is_independent_of_job_count() {
    let root = tempfile::tempdir().unwrap();
    let clean_dir = root.path().join("clean");
    std::fs::create_dir_all(&clean_dir).unwrap();
    for i in 0..5 {
        let w = speechlike(40 + i, 16000, 16000);
        tfrestore_core::wav::write_wav(clean_dir.join(format!("utt{i}.wav")), &w, tfrestore_core::wav::WavFormat::Float32)
            .unwrap();
    }
    std::fs::write(clean_dir.join("notes.txt"), "ignored").unwrap();
    let clean = load_wav_dir(&clean_dir).unwrap();
    assert_eq!(clean.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>(), ["utt0", "utt1", "utt2", "utt3", "utt4"]);

    let mut cfg = DegradeConfig::training();
    cfg.target_rates = vec![16000];
    let a_dir = root.path().join("a");
    let b_dir = root.path().join("b");
    let a = simulate_corpus(&clean, &assets(16000), &cfg, 11, &a_dir, Split::Train, 1).unwrap();
    let b = simulate_corpus(&clean, &assets(16000), &cfg, 11, &b_dir, Split::Train, 3).unwrap();
    assert_eq!(a, b);
    for r in &a {
        for p in [&r.input_path, &r.target_path] {
            assert_eq!(std::fs::read(a_dir.join(p)).unwrap(), std::fs::read(b_dir.join(p)).unwrap());
        }
        assert_eq!(r.recipe.seed, utterance_seed(11, a.iter().position(|x| x.id == r.id).unwrap()));
    }
    let seeds: std::collections::BTreeSet<u64> = a.iter().map(|r| r.recipe.seed).collect();
    assert_eq!(seeds.len(), 5);

    let path = a_dir.join("manifest.jsonl");
    write_manifest(&path, &a).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 5);
    assert_eq!(read_manifest(&path).unwrap(), a);
}

#[test]
fn passthrough_corpus_gives_identical_pairs() {
    let root = tempfile::tempdir().unwrap();
    let src = root.path().join("c.wav");
    tfrestore_core::wav::write_wav(&src, &speechlike(5, 8000, 16000), tfrestore_core::wav::WavFormat::Float32).unwrap();
    let recs = simulate_corpus(
        &[("c".to_string(), src)],
        &DegradeAssets::default(),
        &DegradeConfig::passthrough(16000),
        0,
        root.path(),
        Split::Eval,
        2,
    )
    .unwrap();
    let r = &recs[0];
    assert_eq!((r.f_e, r.f_d, r.split), (16000, 16000, Split::Eval));
    let (i, t) = r.resolve(root.path());
    assert_eq!(std::fs::read(i).unwrap(), std::fs::read(t).unwrap());
}

#[test]
fn assets_are_resampled_on_load() {
    let root = tempfile::tempdir().unwrap();
    let noise_dir = root.path().join("noise");
    std::fs::create_dir_all(&noise_dir).unwrap();
    tfrestore_core::wav::write_wav(noise_dir.join("n.wav"), &noise(1, 8000, 8000), tfrestore_core::wav::WavFormat::Float32)
        .unwrap();
    let a = load_assets(None, Some(&noise_dir), 16000).unwrap();
    assert!(a.rirs.is_empty());
    assert_eq!(a.noises[0].sample_rate, 16000);
    assert_eq!(a.noises[0].len(), 16000);
    assert!(load_assets(Some(&root.path().join("missing")), None, 16000).is_err());
}
