use ufp_core::audio::AudioBuffer;
use ufp_core::dsp::StftParams;
use ufp_core::encoder::{EncoderConfig, SurrogateEncoder};
use ufp_core::eval::Voice;
use ufp_core::optim::{self, TrainConfig};
use ufp_core::ufp::{Ufp, UfpConfig};
use ufp_core::{rng, SAMPLE_RATE};

fn toy_stft() -> StftParams {
    StftParams::new(256, 64).unwrap()
}

fn toy_encoder() -> SurrogateEncoder {
    SurrogateEncoder::new(EncoderConfig {
        n_mels: 20,
        dim: 32,
        stft: toy_stft(),
        ..EncoderConfig::default()
    })
    .unwrap()
}

fn toy_shape() -> UfpConfig {
    UfpConfig {
        frame_len: 40,
        noise_level: 0.4,
        smoother_k: 5,
    }
}

fn toy_set() -> Vec<AudioBuffer> {
    let voice = Voice::draw(5, 0);
    (0..3)
        .map(|i| AudioBuffer::new(voice.utterance(SAMPLE_RATE as usize, 40 + i), SAMPLE_RATE).unwrap())
        .collect()
}

fn toy_cfg(iterations: usize, lambda: f64) -> TrainConfig {
    TrainConfig {
        iterations,
        lambda,
        aug_jitter_max: toy_stft().hop,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn norm(u: &Ufp) -> f64 {
    u.delta_re.iter().chain(&u.delta_im).map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn training_lowers_feature_loss() {
    let (_, report) = optim::optimize_ufp(&toy_set(), &toy_cfg(40, 1.0), &toy_encoder(), toy_stft(), &toy_shape()).unwrap();
    let first = report.feature[0];
    let last = *report.feature.last().unwrap();
    assert!(last < first, "feature loss {first} -> {last}");
}

#[test]
fn heavy_perception_weight_shrinks_perturbation() {
    let set = toy_set();
    let enc = toy_encoder();
    let mut norms = vec![norm(&Ufp::random(toy_stft(), 40, 0.4, 5, rng::derive_seed(3, "ufp-init")).unwrap())];
    let mut last_report = None;
    for k in 1..=10 {
        let (u, report) = optim::optimize_ufp(&set, &toy_cfg(k, 1e6), &enc, toy_stft(), &toy_shape()).unwrap();
        norms.push(norm(&u));
        last_report = Some(report);
    }
    for w in norms.windows(2) {
        assert!(w[1] < w[0], "{norms:?}");
    }
    let report = last_report.unwrap();
    assert!(report.perception[9] < report.perception[0]);
}

#[test]
fn same_seed_gives_identical_runs() {
    let set = toy_set();
    let enc = toy_encoder();
    let (u1, r1) = optim::optimize_ufp(&set, &toy_cfg(10, 100.0), &enc, toy_stft(), &toy_shape()).unwrap();
    let (u2, r2) = optim::optimize_ufp(&set, &toy_cfg(10, 100.0), &enc, toy_stft(), &toy_shape()).unwrap();
    assert!(r1.same_trajectory(&r2));
    let bytes = |u: &Ufp| {
        let mut b = Vec::new();
        u.write_to(&mut b).unwrap();
        b
    };
    assert_eq!(bytes(&u1), bytes(&u2));
    assert_eq!(u1.param_count(), 2 * toy_stft().bins() * 40);

    let (u3, _) = optim::optimize_ufp(&set, &TrainConfig { seed: 4, ..toy_cfg(10, 100.0) }, &enc, toy_stft(), &toy_shape()).unwrap();
    assert_ne!(bytes(&u1), bytes(&u3));
}

#[test]
fn gradient_norm_grows_with_input_length() {
    let u = Ufp::random(toy_stft(), 40, 0.4, 5, 12).unwrap();
    let norms = optim::gradient_amplification(&u, &toy_encoder(), &[1, 2, 4, 8], 6).unwrap();
    for w in norms.windows(2) {
        assert!(w[1].1 > w[0].1, "{norms:?}");
    }
}
