//! Waveform-to-waveform preprocessing an attacker might use to strip a
//! perturbation, and the suite that scores protection under each.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioBuffer};
use crate::dsp::{self, Spectrogram, StftParams};
use crate::encoder::{Embedding, SpeakerEncoder};
use crate::error::{invalid, Error, Result};
use crate::eval;
use crate::SAMPLE_RATE;

pub const QUANT_LEVELS: usize = 256;
const QUANT_STEP: f64 = 2.0 / QUANT_LEVELS as f64;

/// Mid-rise quantization to 256 levels over [-1, 1].
pub fn quantize_8bit(x: &AudioBuffer) -> AudioBuffer {
    let samples = x
        .samples
        .iter()
        .map(|v| {
            let idx = ((v + 1.0) / QUANT_STEP).floor().clamp(0.0, (QUANT_LEVELS - 1) as f64);
            -1.0 + QUANT_STEP * (idx + 0.5)
        })
        .collect();
    AudioBuffer {
        samples,
        sample_rate: x.sample_rate,
    }
}

pub const RESAMPLE_ATTACK_RATE: u32 = 8_000;

fn fit_length(mut samples: Vec<f64>, len: usize) -> Vec<f64> {
    samples.resize(len, 0.0);
    samples
}

/// Down to 8 kHz and back, trimmed or zero padded to the input length.
pub fn resample_attack(x: &AudioBuffer) -> Result<AudioBuffer> {
    if x.sample_rate != SAMPLE_RATE {
        return Err(invalid(format!(
            "resample attack expects {SAMPLE_RATE} Hz input, got {} Hz",
            x.sample_rate
        )));
    }
    let down = audio::resample(x, RESAMPLE_ATTACK_RATE)?;
    let up = audio::resample(&down, SAMPLE_RATE)?;
    Ok(AudioBuffer {
        samples: fit_length(up.samples, x.len()),
        sample_rate: x.sample_rate,
    })
}

/// Magnitude to mel and back through the filterbank pseudo-inverse, keeping
/// the original phase.
#[derive(Debug, Clone)]
pub struct MelRoundtrip {
    stft: StftParams,
    n_mels: usize,
    /// `n_mels x bins`
    filterbank: Vec<f64>,
    /// `bins x n_mels`
    inverse: Vec<f64>,
}

impl MelRoundtrip {
    pub fn new(stft: StftParams, n_mels: usize, sample_rate: u32) -> Result<Self> {
        let fb = dsp::mel_filterbank(&stft, n_mels, sample_rate)?;
        Self::from_filterbank(stft, n_mels, fb)
    }

    /// Use an arbitrary `n_mels x bins` row-major filterbank.
    pub fn from_filterbank(stft: StftParams, n_mels: usize, filterbank: Vec<f64>) -> Result<Self> {
        stft.validate()?;
        let bins = stft.bins();
        if n_mels == 0 || filterbank.len() != n_mels * bins {
            return Err(Error::ShapeMismatch(format!(
                "filterbank has {} entries, expected {n_mels} x {bins}",
                filterbank.len()
            )));
        }
        let m = DMatrix::from_row_slice(n_mels, bins, &filterbank);
        let pinv = m
            .pseudo_inverse(1e-10)
            .map_err(|e| invalid(format!("filterbank pseudo-inverse: {e}")))?;
        let mut inverse = vec![0.0; bins * n_mels];
        for b in 0..bins {
            for j in 0..n_mels {
                inverse[b * n_mels + j] = pinv[(b, j)];
            }
        }
        Ok(Self {
            stft,
            n_mels,
            filterbank,
            inverse,
        })
    }

    pub fn apply(&self, x: &AudioBuffer) -> Result<AudioBuffer> {
        let spec = dsp::stft(&x.samples, &self.stft)?;
        let bins = self.stft.bins();
        let mut out = Spectrogram::zeros(self.stft, spec.frames());
        let mut mag = vec![0.0; bins];
        let mut mel = vec![0.0; self.n_mels];
        for m in 0..spec.frames() {
            let base = m * bins;
            for (b, v) in mag.iter_mut().enumerate() {
                *v = spec.re[base + b].hypot(spec.im[base + b]);
            }
            for (j, e) in mel.iter_mut().enumerate() {
                *e = self.filterbank[j * bins..(j + 1) * bins].iter().zip(&mag).map(|(w, a)| w * a).sum();
            }
            for (b, &orig) in mag.iter().enumerate() {
                let rec: f64 = self.inverse[b * self.n_mels..(b + 1) * self.n_mels]
                    .iter()
                    .zip(&mel)
                    .map(|(w, e)| w * e)
                    .sum::<f64>()
                    .max(0.0);
                let i = base + b;
                if orig > 0.0 {
                    out.re[i] = spec.re[i] / orig * rec;
                    out.im[i] = spec.im[i] / orig * rec;
                } else {
                    out.re[i] = rec;
                }
            }
        }
        Ok(AudioBuffer {
            samples: dsp::resynthesize(&out, &x.samples)?,
            sample_rate: x.sample_rate,
        })
    }
}

pub fn mel_roundtrip(x: &AudioBuffer, n_mels: usize) -> Result<AudioBuffer> {
    MelRoundtrip::new(StftParams::default(), n_mels, x.sample_rate)?.apply(x)
}

pub const WIENER_MIN_FRAMES: usize = 10;
/// Fraction of lowest-energy frames used as the noise estimate.
pub const WIENER_NOISE_FRACTION: f64 = 0.1;

/// Spectral Wiener gain `max(0, 1 - N / |S|^2)` with the noise PSD `N`
/// averaged over the quietest tenth of frames.
pub fn wiener_denoise(x: &AudioBuffer) -> Result<AudioBuffer> {
    wiener_denoise_with(x, &StftParams::default())
}

pub fn wiener_denoise_with(x: &AudioBuffer, stft: &StftParams) -> Result<AudioBuffer> {
    let frames = stft.frames(x.len()).unwrap_or(0);
    if frames < WIENER_MIN_FRAMES {
        return Err(Error::TooShort(format!(
            "Wiener denoising needs at least {WIENER_MIN_FRAMES} frames ({} samples), got {} samples",
            stft.covered_len(WIENER_MIN_FRAMES),
            x.len()
        )));
    }
    let mut spec = dsp::stft(&x.samples, stft)?;
    let bins = stft.bins();
    let power: Vec<f64> = spec.re.iter().zip(&spec.im).map(|(r, i)| r * r + i * i).collect();
    let mut order: Vec<(f64, usize)> = power.chunks_exact(bins).map(|f| f.iter().sum::<f64>()).zip(0..).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let quiet = ((frames as f64 * WIENER_NOISE_FRACTION).ceil() as usize).max(1);
    let mut noise = vec![0.0; bins];
    for &(_, m) in &order[..quiet] {
        for (n, p) in noise.iter_mut().zip(&power[m * bins..(m + 1) * bins]) {
            *n += p / quiet as f64;
        }
    }
    for (i, p) in power.iter().enumerate() {
        let g = if *p > 0.0 { (1.0 - noise[i % bins] / p).max(0.0) } else { 0.0 };
        spec.re[i] *= g;
        spec.im[i] *= g;
    }
    Ok(AudioBuffer {
        samples: dsp::resynthesize(&spec, &x.samples)?,
        sample_rate: x.sample_rate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    Quantize,
    Resample,
    MelRoundtrip,
    Denoise,
}

impl AttackKind {
    pub const ALL: [AttackKind; 5] = [
        AttackKind::None,
        AttackKind::Quantize,
        AttackKind::Resample,
        AttackKind::MelRoundtrip,
        AttackKind::Denoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Quantize => "quantize",
            AttackKind::Resample => "resample",
            AttackKind::MelRoundtrip => "mel_roundtrip",
            AttackKind::Denoise => "denoise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown attack {s:?}")))
    }
}

/// Attack settings; the mel pseudo-inverse is computed once.
#[derive(Debug, Clone)]
pub struct Attacks {
    mel: MelRoundtrip,
    stft: StftParams,
}

pub const DEFAULT_ATTACK_MELS: usize = 40;

impl Attacks {
    pub fn new(stft: StftParams, n_mels: usize) -> Result<Self> {
        Ok(Self {
            mel: MelRoundtrip::new(stft, n_mels, SAMPLE_RATE)?,
            stft,
        })
    }

    pub fn apply(&self, kind: AttackKind, x: &AudioBuffer) -> Result<AudioBuffer> {
        match kind {
            AttackKind::None => Ok(x.clone()),
            AttackKind::Quantize => Ok(quantize_8bit(x)),
            AttackKind::Resample => resample_attack(x),
            AttackKind::MelRoundtrip => self.mel.apply(x),
            AttackKind::Denoise => wiener_denoise_with(x, &self.stft),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub attack: AttackKind,
    pub evasion_rate: f64,
    pub seg_snr_db: Option<f64>,
    pub spr: Option<f64>,
    pub dpr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTable {
    pub threshold: f64,
    pub files: usize,
    pub rows: Vec<AttackRow>,
}

impl AttackTable {
    pub fn row(&self, kind: AttackKind) -> Option<&AttackRow> {
        self.rows.iter().find(|r| r.attack == kind)
    }

    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        let mut out = format!("{:<14} {:>10} {:>10} {:>10} {:>10}\n", "attack", "evasion", "seg_snr_db", "spr", "dpr");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<14} {:>10.4} {:>10} {:>10} {:>10}",
                r.attack.name(),
                r.evasion_rate,
                opt(r.seg_snr_db),
                opt(r.spr),
                opt(r.dpr)
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("attack table: {e}")))
    }
}

/// Files attacked under one kind, scored against their originals and, when
/// given, against clones produced from the attacked audio.
struct FileScores {
    attacked: Embedding,
    snr: Option<f64>,
}

/// Apply every attack to every protected file and score the result.
///
/// `clones`, when present, maps each attack to clones index-aligned with
/// `protected`; SPR compares each clone with the attacked protected file and
/// DPR with the original.
pub fn run_attack_suite<E: SpeakerEncoder>(
    protected: &[AudioBuffer],
    originals: &[AudioBuffer],
    clones: Option<&dyn Fn(AttackKind) -> Option<Vec<AudioBuffer>>>,
    threshold: f64,
    encoder: &E,
    attacks: &Attacks,
) -> Result<AttackTable> {
    if protected.len() != originals.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} protected and {} original files",
            protected.len(),
            originals.len()
        )));
    }
    if protected.is_empty() {
        return Err(invalid("attack suite needs at least one file"));
    }
    let clean: Vec<Embedding> = originals
        .par_iter()
        .map(|x| encoder.embed(&x.samples))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(AttackKind::ALL.len());
    for kind in AttackKind::ALL {
        let scores: Vec<FileScores> = protected
            .par_iter()
            .zip(originals.par_iter())
            .map(|(p, o)| {
                let attacked = attacks.apply(kind, p)?;
                let snr = if attacked.len() == o.len() {
                    eval::segmental_snr(o, &attacked).ok()
                } else {
                    None
                };
                Ok(FileScores {
                    attacked: encoder.embed(&attacked.samples)?,
                    snr,
                })
            })
            .collect::<Result<_>>()?;
        let attacked: Vec<Embedding> = scores.iter().map(|s| s.attacked.clone()).collect();
        let evasion_rate = eval::reject_rate(&clean, &attacked, threshold)?;
        let snrs: Vec<f64> = scores.iter().filter_map(|s| s.snr).collect();
        let seg_snr_db = (!snrs.is_empty()).then(|| snrs.iter().sum::<f64>() / snrs.len() as f64);
        let (spr, dpr) = match clones.and_then(|f| f(kind)) {
            Some(c) => {
                if c.len() != protected.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "{} clones for {} files under {}",
                        c.len(),
                        protected.len(),
                        kind.name()
                    )));
                }
                let cloned: Vec<Embedding> = c.par_iter().map(|x| encoder.embed(&x.samples)).collect::<Result<_>>()?;
                (
                    Some(eval::reject_rate(&attacked, &cloned, threshold)?),
                    Some(eval::reject_rate(&clean, &cloned, threshold)?),
                )
            }
            None => (None, None),
        };
        rows.push(AttackRow {
            attack: kind,
            evasion_rate,
            seg_snr_db,
            spr,
            dpr,
        });
    }
    Ok(AttackTable {
        threshold,
        files: protected.len(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn tone(freq: f64, secs: f64, amp: f64) -> AudioBuffer {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        AudioBuffer::new(
            (0..n)
                .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
                .collect(),
            SAMPLE_RATE,
        )
        .unwrap()
    }

    fn noise(secs: f64, std: f64, seed: u64) -> AudioBuffer {
        let mut r = rng::rng_from(seed);
        let n = (secs * SAMPLE_RATE as f64) as usize;
        AudioBuffer::new((0..n).map(|_| std * r.sample::<f64, _>(StandardNormal)).collect(), SAMPLE_RATE).unwrap()
    }

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb)
    }

    #[test]
    fn quantize_levels_error_and_idempotence() {
        let x = noise(0.5, 0.5, 1);
        let q = quantize_8bit(&x);
        let mut levels: Vec<u64> = q.samples.iter().map(|v| v.to_bits()).collect();
        levels.sort_unstable();
        levels.dedup();
        assert!(levels.len() <= 256);
        assert_eq!(quantize_8bit(&q), q);
        for (a, b) in x.samples.iter().zip(&q.samples) {
            if a.abs() <= 1.0 {
                assert!((a - b).abs() <= 1.0 / 256.0 + 1e-15);
            }
        }
        assert_eq!(q.sample_rate, x.sample_rate);
    }

    #[test]
    fn resample_attack_band_behaviour() {
        let low = tone(1000.0, 1.0, 0.5);
        let y = resample_attack(&low).unwrap();
        assert_eq!(y.len(), low.len());
        let core = 800..low.len() - 800;
        assert!(corr(&low.samples[core.clone()], &y.samples[core.clone()]) >= 0.99);

        let high = tone(6000.0, 1.0, 0.5);
        let y = resample_attack(&high).unwrap();
        let e_in: f64 = high.samples[core.clone()].iter().map(|v| v * v).sum();
        let e_out: f64 = y.samples[core].iter().map(|v| v * v).sum();
        assert!(10.0 * (e_in / e_out).log10() >= 20.0);

        let x = noise(1.0, 0.1, 5);
        let y = resample_attack(&x).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean(&x.samples) - mean(&y.samples)).abs() < 1e-4);

        let wrong = AudioBuffer::new(vec![0.0; 100], 8000).unwrap();
        assert!(resample_attack(&wrong).is_err());
    }

    #[test]
    fn resample_attack_commutes_with_sign_flip() {
        let x = noise(0.5, 0.2, 8);
        let neg = AudioBuffer::new(x.samples.iter().map(|v| -v).collect(), SAMPLE_RATE).unwrap();
        let a = resample_attack(&neg).unwrap();
        let b = resample_attack(&x).unwrap();
        for (p, q) in a.samples.iter().zip(&b.samples) {
            assert!((p + q).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_filterbank_reconstructs() {
        let p = StftParams::default();
        let bins = p.bins();
        let mut fb = vec![0.0; bins * bins];
        for b in 0..bins {
            fb[b * bins + b] = 1.0;
        }
        let m = MelRoundtrip::from_filterbank(p, bins, fb).unwrap();
        let x = noise(1.0, 0.1, 3);
        let y = m.apply(&x).unwrap();
        assert_eq!(y.len(), x.len());
        let err: f64 = x.samples.iter().zip(&y.samples).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(err / x.energy().sqrt() < 0.05);
    }

    #[test]
    fn mel_roundtrip_keeps_speech_like_signal() {
        let v = eval::Voice::draw(11, 0);
        let x = AudioBuffer::new(v.utterance(32000, 5), SAMPLE_RATE).unwrap();
        let y = mel_roundtrip(&x, 40).unwrap();
        assert_eq!(y.len(), x.len());
        let c = corr(&x.samples, &y.samples);
        assert!(c >= 0.8, "{c}");
        assert_eq!(mel_roundtrip(&x, 40).unwrap(), y);
    }

    #[test]
    fn wiener_keeps_tone_over_quiet_floor() {
        // The quietest frames carry only the floor, so the noise estimate
        // does not include the tone.
        let mut x = tone(500.0, 2.0, 0.5);
        let floor = noise(2.0, 1e-4, 2);
        let quiet = x.len() / 5;
        for (i, (s, f)) in x.samples.iter_mut().zip(&floor.samples).enumerate() {
            if i < quiet {
                *s = 0.0;
            }
            *s += f;
        }
        let y = wiener_denoise(&x).unwrap();
        let core = quiet + 2048..x.len() - 2048;
        let err: f64 = x.samples[core.clone()]
            .iter()
            .zip(&y.samples[core.clone()])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let e: f64 = x.samples[core].iter().map(|v| v * v).sum();
        assert!(err / e < 1e-3, "{}", err / e);
        assert_eq!(wiener_denoise(&x).unwrap(), y);
    }

    #[test]
    fn wiener_suppresses_white_noise() {
        let x = noise(2.0, 0.1, 4);
        let y = wiener_denoise(&x).unwrap();
        assert!(y.energy() < x.energy());
        assert_eq!(y.len(), x.len());
    }

    #[test]
    fn wiener_needs_ten_frames() {
        let p = StftParams::default();
        let short = AudioBuffer::new(vec![0.1; p.covered_len(9)], SAMPLE_RATE).unwrap();
        assert!(matches!(wiener_denoise(&short), Err(Error::TooShort(_))));
        let ok = noise(p.covered_len(10) as f64 / SAMPLE_RATE as f64 + 0.001, 0.1, 1);
        assert!(wiener_denoise(&ok).is_ok());
    }

    #[test]
    fn attacks_preserve_rate_length_and_determinism() {
        let attacks = Attacks::new(StftParams::default(), 40).unwrap();
        let x = AudioBuffer::new(eval::Voice::draw(3, 1).utterance(24000, 9), SAMPLE_RATE).unwrap();
        for kind in AttackKind::ALL {
            let a = attacks.apply(kind, &x).unwrap();
            assert_eq!(a.sample_rate, x.sample_rate, "{}", kind.name());
            assert_eq!(a.len(), x.len(), "{}", kind.name());
            assert_eq!(attacks.apply(kind, &x).unwrap(), a, "{}", kind.name());
            assert_eq!(AttackKind::parse(kind.name()).unwrap(), kind);
        }
        assert!(AttackKind::parse("griffin_lim").is_err());
    }
}
