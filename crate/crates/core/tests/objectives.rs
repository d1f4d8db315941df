use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tfrestore_core::nn::{gradcheck, scaled_log_grad, Graph, Tensor};
use tfrestore_core::objectives::{
    complex_l1, complex_l1_value, feature_mse, generator_loss, perceptual_loss, perceptual_loss_value, pretrain_loss,
    resample_var, scaled_log_loss, scaled_log_loss_value, synthesize, ComponentWeights, FeatureExtractor, FeatureStore,
    GeneratorTerms, LogMel, LossError, LossWeights, ScaleField, MAG_EPS, SCALE_FLOOR,
};
use tfrestore_core::sfi_stft::{stft, ComplexSpectrogram, StftParams, Waveform};

fn params() -> StftParams {
    StftParams::for_rate(8000).unwrap()
}

fn random_spec(rng: &mut ChaCha8Rng, frames: usize, scale: f64) -> ComplexSpectrogram {
    let p = params();
    let data = (0..p.n_bins * frames * 2).map(|_| rng.gen_range(-scale..scale)).collect();
    ComplexSpectrogram::from_data(data, frames, p).unwrap()
}

fn noise(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
}

const ONLY_REAL: ComponentWeights = ComponentWeights { real: 1.0, imag: 0.0, mag: 0.0 };
const ONLY_MAG: ComponentWeights = ComponentWeights { real: 0.0, imag: 0.0, mag: 1.0 };

#[test]
fn identical_spectrograms_give_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = random_spec(&mut rng, 7, 1.0);
    let a = ComponentWeights::default();
    assert_eq!(scaled_log_loss_value(&s, &s, &a).unwrap(), 0.0);
    assert_eq!(complex_l1_value(&s, &s, &a).unwrap(), 0.0);
}

#[test]
fn unit_error_at_unit_scale_is_ln_two() {
    // every target bin has magnitude 1, so w_f = 1; the estimate is off by 1 in the real part
    let p = params();
    let frames = 4;
    let mut s = ComplexSpectrogram::zeros(p, frames);
    let mut y = ComplexSpectrogram::zeros(p, frames);
    for f in 0..p.n_bins {
        for t in 0..frames {
            s.set(f, t, 1.0, 0.0);
            y.set(f, t, 2.0, 0.0);
        }
    }
    assert!(ScaleField::from_target(&s).w.iter().all(|&w| w == 1.0));
    let l = scaled_log_loss_value(&y, &s, &ONLY_REAL).unwrap();
    assert!((l - 2f64.ln()).abs() < 1e-12, "{l}");
}

#[test]
fn scale_field_is_frame_mean_with_floor() {
    let p = params();
    let mut s = ComplexSpectrogram::zeros(p, 2);
    s.set(3, 0, 3.0, 4.0);
    s.set(3, 1, 0.0, 1.0);
    let w = ScaleField::from_target(&s).w;
    assert_eq!(w[3], 3.0);
    assert_eq!(w[0], SCALE_FLOOR);
}

#[test]
fn scaled_log_gradient_closed_form() {
    for w in [1e-3, 0.5, 1.0, 7.0] {
        assert!((scaled_log_grad(w, w) - 0.5).abs() <= 1e-9);
        assert!((scaled_log_grad(0.0, w) - 1.0).abs() <= 1e-9);
    }
}

fn naive_l1(y: &ComplexSpectrogram, s: &ComplexSpectrogram, a: &ComponentWeights) -> f64 {
    let (nf, nt) = (s.n_bins(), s.n_frames);
    let n = (nf * nt) as f64;
    let mut sums = [0.0; 3];
    for f in 0..nf {
        for t in 0..nt {
            let (yr, yi) = y.get(f, t);
            let (sr, si) = s.get(f, t);
            sums[0] += (yr - sr).abs();
            sums[1] += (yi - si).abs();
            sums[2] += ((yr * yr + yi * yi + MAG_EPS).sqrt() - (sr * sr + si * si + MAG_EPS).sqrt()).abs();
        }
    }
    a.real * sums[0] / n + a.imag * sums[1] / n + a.mag * sums[2] / n
}

#[test]
fn complex_l1_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (y, s) = (random_spec(&mut rng, 9, 1.0), random_spec(&mut rng, 9, 1.0));
    for a in [ComponentWeights::default(), ONLY_MAG, ONLY_REAL] {
        let got = complex_l1_value(&y, &s, &a).unwrap();
        assert!((got - naive_l1(&y, &s, &a)).abs() <= 1e-12);
    }
}

#[test]
fn frame_permutation_leaves_losses_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (y, s) = (random_spec(&mut rng, 6, 1.0), random_spec(&mut rng, 6, 1.0));
    let perm = [3, 0, 5, 1, 4, 2];
    let permute = |x: &ComplexSpectrogram| {
        let mut out = x.clone();
        for f in 0..x.n_bins() {
            for (t, &src) in perm.iter().enumerate() {
                let (re, im) = x.get(f, src);
                out.set(f, t, re, im);
            }
        }
        out
    };
    let a = ComponentWeights::default();
    let base = scaled_log_loss_value(&y, &s, &a).unwrap();
    let moved = scaled_log_loss_value(&permute(&y), &permute(&s), &a).unwrap();
    assert!((base - moved).abs() < 1e-12);
}

#[test]
fn shape_mismatch_is_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (y, s) = (random_spec(&mut rng, 5, 1.0), random_spec(&mut rng, 6, 1.0));
    let a = ComponentWeights::default();
    assert!(matches!(scaled_log_loss_value(&y, &s, &a), Err(LossError::ShapeMismatch(_))));
    assert!(matches!(complex_l1_value(&y, &s, &a), Err(LossError::ShapeMismatch(_))));
}

fn spec_tensor(s: &ComplexSpectrogram) -> Tensor {
    Tensor::new(vec![2, s.n_bins(), s.n_frames], s.to_channels_first())
}

#[test]
fn spectral_loss_gradients_match_finite_differences() {
    let p = StftParams::with_sizes(8000, 16, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = |rng: &mut ChaCha8Rng| (0..p.n_bins * 5 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let s = ComplexSpectrogram::from_data(data(&mut rng), 5, p).unwrap();
    let y = ComplexSpectrogram::from_data(data(&mut rng), 5, p).unwrap();
    let a = ComponentWeights::default();
    let errs = gradcheck::check_inputs(&[spec_tensor(&y)], 1e-6, |g, v| Ok(scaled_log_loss(g, v[0], &s, &a).unwrap())).unwrap();
    assert!(errs[0] <= 1e-6, "scaled log {errs:?}");
    let errs = gradcheck::check_inputs(&[spec_tensor(&y)], 1e-6, |g, v| Ok(complex_l1(g, v[0], &s, &a).unwrap())).unwrap();
    assert!(errs[0] <= 1e-6, "l1 {errs:?}");
}

#[test]
fn synthesis_and_resampling_gradients_match_finite_differences() {
    let p = StftParams::for_rate(8000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let y = Tensor::new(vec![2, p.n_bins, 4], (0..2 * p.n_bins * 4).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let w: Vec<f64> = (0..640).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let errs = gradcheck::check_inputs(&[y], 1e-5, |g, v| {
        let x = synthesize(g, v[0], p, 640).unwrap();
        let x = resample_var(g, x, 8000, 16000).unwrap();
        let c = g.constant(Tensor::new(vec![1280], w.iter().flat_map(|&a| [a, -a]).collect()));
        Ok(g.sum(g.mul(g.square(x), c)?))
    })
    .unwrap();
    assert!(errs[0] <= 1e-6, "{errs:?}");
}

#[test]
fn perceptual_surrogate_basics() {
    let mel = LogMel::new();
    let s = Waveform::new(noise(7, 4000), 16000);
    assert_eq!(perceptual_loss_value(&s, &s, &mel).unwrap(), 0.0);

    let mut shifted = s.samples.clone();
    shifted.rotate_right(1);
    shifted[0] = 0.0;
    let l = perceptual_loss_value(&Waveform::new(shifted, 16000), &s, &mel).unwrap();
    let far = perceptual_loss_value(&Waveform::new(noise(8, 4000), 16000), &s, &mel).unwrap();
    assert!(l > 0.0 && l < 0.1 * far, "shifted {l}, unrelated {far}");

    let f = mel.features_of(&s).unwrap();
    assert_eq!(f.shape, vec![25, 80]);

    let at8 = Waveform::new(noise(9, 2000), 8000);
    assert!(matches!(
        perceptual_loss_value(&at8, &s, &mel),
        Err(LossError::RateMismatch { expected: 16000, got: 8000 })
    ));
    assert!(matches!(
        perceptual_loss_value(&s, &at8, &mel),
        Err(LossError::RateMismatch { expected: 16000, got: 8000 })
    ));
    let g = Graph::inference();
    let short = g.constant(Tensor::new(vec![3200], noise(10, 3200)));
    assert!(matches!(perceptual_loss(&g, short, &s, &mel), Err(LossError::ShapeMismatch(_))));
}

#[test]
fn perceptual_gradients_match_finite_differences() {
    let mel = LogMel::new();
    let s = Waveform::new(noise(11, 800), 16000);
    let y = Tensor::new(vec![800], noise(12, 800));
    let errs = gradcheck::check_inputs(&[y], 1e-6, |g, v| Ok(perceptual_loss(g, v[0], &s, &mel).unwrap())).unwrap();
    assert!(errs[0] <= 1e-6, "{errs:?}");
}

#[test]
fn external_feature_store_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let store = FeatureStore::new(dir.path());
    let t = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]);
    store.save("utt1", &t).unwrap();
    assert_eq!(store.load("utt1").unwrap(), t);
    assert!(matches!(store.load("nope"), Err(LossError::MissingFeatures(_))));

    let g = Graph::inference();
    let est = g.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 4.5]));
    let l = feature_mse(&g, est, &t).unwrap();
    assert!((g.value(l).item() - 4.0 / 6.0).abs() < 1e-15);
    let bad = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(feature_mse(&g, bad, &t), Err(LossError::ShapeMismatch(_))));
}

fn scalar(g: &Graph, v: f64) -> tfrestore_core::nn::Var {
    g.constant(Tensor::scalar(v))
}

#[test]
fn stage_totals_are_weighted_sums() {
    let w = LossWeights::default();
    let g = Graph::inference();
    let (total, r) = pretrain_loss(&g, scalar(&g, 0.3), scalar(&g, 0.7), &w).unwrap();
    assert!((g.value(total).item() - (100.0 * 0.3 + 0.7)).abs() < 1e-12);
    assert_eq!((r.perceptual, r.spectral, r.adversarial), (0.3, 0.7, 0.0));

    let (zero, _) = pretrain_loss(&g, scalar(&g, 0.0), scalar(&g, 0.0), &w).unwrap();
    assert_eq!(g.value(zero).item(), 0.0);

    let only_s = LossWeights { perceptual: 0.0, ..w };
    let (t, _) = pretrain_loss(&g, scalar(&g, 5.0), scalar(&g, 0.25), &only_s).unwrap();
    assert_eq!(g.value(t).item(), 0.25);

    let terms = GeneratorTerms {
        perceptual: scalar(&g, 0.3),
        spectral: scalar(&g, 0.7),
        adversarial: scalar(&g, 0.9),
        feature_matching: scalar(&g, 1.1),
        human_feedback: Some(scalar(&g, 2.0)),
    };
    let (t, r) = generator_loss(&g, &terms, &w).unwrap();
    let expected = 0.005 * 0.9 + 0.1 * 1.1 + 100.0 * 0.3 + 0.7 + 1e-4 * 2.0;
    assert!((g.value(t).item() - expected).abs() < 1e-12);
    assert!((r.total - expected).abs() < 1e-12);
    assert_eq!(r.human_feedback, 2.0);
    let without = GeneratorTerms { human_feedback: None, ..terms };
    let (t, r) = generator_loss(&g, &without, &w).unwrap();
    assert!((g.value(t).item() - (expected - 1e-4 * 2.0)).abs() < 1e-12);
    assert_eq!(r.human_feedback, 0.0);
}

#[test]
fn default_weights_and_validation() {
    let w = LossWeights::default();
    assert_eq!((w.alpha.mag, w.alpha.real, w.alpha.imag), (0.6, 0.2, 0.2));
    assert_eq!((w.perceptual, w.spectral), (100.0, 1.0));
    assert_eq!((w.adversarial, w.feature_matching, w.human_feedback), (0.005, 0.1, 1e-4));
    w.validate().unwrap();
    let bad = LossWeights { spectral: -1.0, ..w };
    assert!(matches!(bad.validate(), Err(LossError::NegativeWeight("spectral"))));
}

#[test]
fn restoring_a_spectrogram_of_a_real_signal() {
    // loss against the analysis of the same waveform is zero through the full chain
    let w = Waveform::new(noise(13, 1600), 8000);
    let s = stft(&w, &params()).unwrap();
    let g = Graph::inference();
    let y = g.constant(spec_tensor(&s));
    let l = scaled_log_loss(&g, y, &s, &ComponentWeights::default()).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_is_decreasing_and_bounded(w in 1e-4f64..10.0, d1 in 0.0f64..100.0, d2 in 0.0f64..100.0) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let (a, b) = (scaled_log_grad(lo, w), scaled_log_grad(hi, w));
        prop_assert!(a >= b);
        prop_assert!(a > 0.0 && a <= 1.0 && b > 0.0 && b <= 1.0);
    }

    #[test]
    fn scaled_log_never_exceeds_l1(seed in 0u64..1000, scale in 0.01f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (y, s) = (random_spec(&mut rng, 3, scale), random_spec(&mut rng, 3, scale));
        let a = ComponentWeights::default();
        let sl = scaled_log_loss_value(&y, &s, &a).unwrap();
        let l1 = complex_l1_value(&y, &s, &a).unwrap();
        prop_assert!(sl >= 0.0);
        prop_assert!(sl <= l1 + 1e-12);
        prop_assert!(sl > 0.0);
    }
}
