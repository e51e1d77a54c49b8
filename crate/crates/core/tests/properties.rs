use proptest::prelude::*;
use ufp_core::audio::AudioBuffer;
use ufp_core::dsp::StftParams;
use ufp_core::encoder::{cosine_similarity, Embedding};
use ufp_core::eval::{self, ScoredTrial};
use ufp_core::ufp::{self, Ufp};
use ufp_core::SAMPLE_RATE;

fn brute_force_eer(trials: &[ScoredTrial]) -> f64 {
    let mut scores: Vec<f64> = trials.iter().map(|t| t.score).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let mut candidates = vec![scores[0] - 1.0];
    candidates.extend(scores.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(scores[scores.len() - 1] + 1.0);
    let pos: f64 = trials.iter().filter(|t| t.same_speaker).map(|t| t.weight).sum();
    let neg: f64 = trials.iter().filter(|t| !t.same_speaker).map(|t| t.weight).sum();
    let mut best = (f64::INFINITY, 0.0);
    for tau in candidates {
        let fnr: f64 = trials.iter().filter(|t| t.same_speaker && t.score < tau).map(|t| t.weight).sum::<f64>() / pos;
        let fpr: f64 = trials.iter().filter(|t| !t.same_speaker && t.score >= tau).map(|t| t.weight).sum::<f64>() / neg;
        if (fnr - fpr).abs() < best.0 {
            best = ((fnr - fpr).abs(), 0.5 * (fnr + fpr));
        }
    }
    best.1
}

fn trial_set() -> impl Strategy<Value = Vec<ScoredTrial>> {
    prop::collection::vec((-20i32..20, any::<bool>()), 2..120)
        .prop_filter("both classes", |v| v.iter().any(|t| t.1) && v.iter().any(|t| !t.1))
        .prop_map(|v| {
            v.into_iter()
                .map(|(s, same)| ScoredTrial {
                    score: s as f64 / 10.0,
                    same_speaker: same,
                    weight: 1.0,
                })
                .collect()
        })
}

fn unit_vectors(n: usize) -> impl Strategy<Value = Vec<Embedding>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 8), n).prop_map(|vs| {
        vs.into_iter()
            .map(|v| {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                Embedding(v.iter().map(|x| x / norm).collect())
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn eer_matches_brute_force(trials in trial_set()) {
        let fast = eval::compute_eer_threshold(&trials).unwrap();
        prop_assert!((fast.eer - brute_force_eer(&trials)).abs() < 1e-12);
    }

    #[test]
    fn eer_threshold_balances_decisions(
        scores in prop::collection::vec((-1.0f64..1.0, any::<bool>()), 4..200)
            .prop_filter("both classes", |v| v.iter().any(|t| t.1) && v.iter().any(|t| !t.1))
    ) {
        let trials: Vec<ScoredTrial> = scores
            .iter()
            .map(|&(score, same_speaker)| ScoredTrial { score, same_speaker, weight: 1.0 })
            .collect();
        let point = eval::compute_eer_threshold(&trials).unwrap();
        let pos = trials.iter().filter(|t| t.same_speaker).count() as f64;
        let neg = trials.len() as f64 - pos;
        let fnr = trials.iter().filter(|t| t.same_speaker && t.score < point.threshold).count() as f64 / pos;
        let fpr = trials.iter().filter(|t| !t.same_speaker && t.score >= point.threshold).count() as f64 / neg;
        prop_assert!((fnr - fpr).abs() <= (1.0 / pos).max(1.0 / neg) + 1e-12);
    }

    #[test]
    fn cosine_ignores_positive_scale(v in unit_vectors(2), c in 0.01f64..100.0) {
        let scaled = Embedding(v[1].0.iter().map(|x| x * c).collect());
        let a = cosine_similarity(&v[0], &v[1]).unwrap();
        let b = cosine_similarity(&v[0], &scaled).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn rates_ignore_list_order(
        a in unit_vectors(12),
        b in unit_vectors(12),
        tau in -1.0f64..1.0,
        perm in Just((0..12usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let pa: Vec<Embedding> = perm.iter().map(|&i| a[i].clone()).collect();
        let pb: Vec<Embedding> = perm.iter().map(|&i| b[i].clone()).collect();
        prop_assert_eq!(eval::reject_rate(&a, &b, tau).unwrap(), eval::reject_rate(&pa, &pb, tau).unwrap());
        prop_assert_eq!(eval::accept_rate(&a, &b, tau).unwrap(), eval::accept_rate(&pa, &pb, tau).unwrap());
    }

    #[test]
    fn match_rate_and_dpr_are_complements(a in unit_vectors(10), tau in -1.0f64..1.0) {
        let b = a.clone();
        prop_assert_eq!(eval::accept_rate(&a, &b, tau).unwrap() + eval::reject_rate(&a, &b, tau).unwrap(), 1.0);
    }

    #[test]
    fn deploy_mode_is_bit_deterministic(seed in 0u64..1000, extra in 0usize..64) {
        let params = StftParams::new(64, 16).unwrap();
        let u = Ufp::random(params, 6, 0.3, 3, seed).unwrap();
        let n = params.covered_len(20) + extra;
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37 + seed as f64).sin() * 0.3).collect();
        let x = AudioBuffer::new(x, SAMPLE_RATE).unwrap();
        let y1 = ufp::protect(&x, &u).unwrap();
        let y2 = ufp::protect(&x, &u).unwrap();
        prop_assert!(y1.samples.iter().zip(&y2.samples).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
