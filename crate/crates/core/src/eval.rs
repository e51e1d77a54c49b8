//! Verification metrics, EER thresholds, timing, quality and the synthetic
//! multi-speaker corpus.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioBuffer};
use crate::dsp::StftParams;
use crate::encoder::{cosine_similarity, Embedding, SpeakerEncoder};
use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::ufp::{self, Ufp};
use crate::SAMPLE_RATE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub path_a: PathBuf,
    pub path_b: PathBuf,
    pub same_speaker: bool,
    pub weight: f64,
}

/// Parse `path_a path_b label [weight]` lines. Relative paths are resolved
/// against `base` when given.
pub fn parse_trials(text: &str, base: Option<&Path>) -> Result<Vec<Trial>> {
    let resolve = |p: &str| match base {
        Some(b) if Path::new(p).is_relative() => b.join(p),
        _ => PathBuf::from(p),
    };
    let mut trials = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line: i + 1, message };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(err(format!("expected 3 or 4 fields, found {}", fields.len())));
        }
        let same_speaker = match fields[2] {
            "1" => true,
            "0" => false,
            other => return Err(err(format!("label must be 0 or 1, found {other:?}"))),
        };
        let weight = match fields.get(3) {
            None => 1.0,
            Some(w) => w
                .parse::<f64>()
                .ok()
                .filter(|w| w.is_finite() && *w >= 0.0)
                .ok_or_else(|| err(format!("weight must be a nonnegative number, found {w:?}")))?,
        };
        trials.push(Trial {
            path_a: resolve(fields[0]),
            path_b: resolve(fields[1]),
            same_speaker,
            weight,
        });
    }
    Ok(trials)
}

pub fn read_trials(path: impl AsRef<Path>) -> Result<Vec<Trial>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trials(&text, path.parent())
}

pub fn format_trials(trials: &[Trial]) -> String {
    let mut out = String::new();
    for t in trials {
        let _ = write!(out, "{} {} {}", t.path_a.display(), t.path_b.display(), u8::from(t.same_speaker));
        if t.weight != 1.0 {
            let _ = write!(out, " {}", t.weight);
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrial {
    pub score: f64,
    pub same_speaker: bool,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerPoint {
    pub threshold: f64,
    pub eer: f64,
    pub fnr: f64,
    pub fpr: f64,
}

/// Threshold just above `s`, so that a trial scoring `s` is rejected.
fn just_above(s: f64) -> f64 {
    s + 1e-9 * s.abs().max(1.0)
}

/// Equal-error-rate operating point.
///
/// Trials are accepted when `score >= threshold`. Candidate thresholds are the
/// lowest score, every midpoint between distinct consecutive scores, and a
/// value just above the highest score; FNR and FPR at each come from weighted
/// cumulative sums over the ascending sort. The candidate minimizing
/// `|FNR - FPR|` wins, the lowest one on ties, and the EER is the mean of the
/// two rates there.
pub fn compute_eer_threshold(trials: &[ScoredTrial]) -> Result<EerPoint> {
    if let Some(t) = trials.iter().find(|t| !t.score.is_finite() || !(t.weight >= 0.0)) {
        return Err(invalid(format!("trial with score {} and weight {}", t.score, t.weight)));
    }
    let pos: f64 = trials.iter().filter(|t| t.same_speaker).map(|t| t.weight).sum();
    let neg: f64 = trials.iter().filter(|t| !t.same_speaker).map(|t| t.weight).sum();
    if !(pos > 0.0 && neg > 0.0) {
        return Err(invalid("EER needs positive weight on both same-speaker and different-speaker trials"));
    }
    let mut sorted = trials.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));

    // k trials rejected: FNR = rejected positives, FPR = accepted negatives.
    let mut best = EerPoint {
        threshold: sorted[0].score,
        eer: 0.5,
        fnr: 0.0,
        fpr: 1.0,
    };
    let mut best_gap = 1.0;
    let mut rej_pos = 0.0;
    let mut rej_neg = 0.0;
    for k in 0..=sorted.len() {
        if k > 0 {
            let t = &sorted[k - 1];
            if t.same_speaker {
                rej_pos += t.weight;
            } else {
                rej_neg += t.weight;
            }
            if k < sorted.len() && sorted[k].score == t.score {
                continue;
            }
        }
        let fnr = rej_pos / pos;
        let fpr = (neg - rej_neg) / neg;
        let gap = (fnr - fpr).abs();
        if k == 0 || gap < best_gap {
            let threshold = match k {
                0 => sorted[0].score,
                k if k == sorted.len() => just_above(sorted[k - 1].score),
                k => 0.5 * (sorted[k - 1].score + sorted[k].score),
            };
            best_gap = gap;
            best = EerPoint {
                threshold,
                eer: 0.5 * (fnr + fpr),
                fnr,
                fpr,
            };
        }
    }
    Ok(best)
}

pub fn sv_decide<E: SpeakerEncoder>(x1: &AudioBuffer, x2: &AudioBuffer, threshold: f64, encoder: &E) -> Result<bool> {
    let a = encoder.embed(&x1.samples)?;
    let b = encoder.embed(&x2.samples)?;
    Ok(cosine_similarity(&a, &b)? >= threshold)
}

/// Number of aligned pairs whose cosine similarity reaches `threshold`.
pub fn accepted_pairs(a: &[Embedding], b: &[Embedding], threshold: f64) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} and {} inputs are not aligned", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(invalid("no pairs to score"));
    }
    let mut n = 0;
    for (x, y) in a.iter().zip(b) {
        if cosine_similarity(x, y)? >= threshold {
            n += 1;
        }
    }
    Ok(n)
}

/// Fraction of aligned pairs that fail verification.
pub fn reject_rate(a: &[Embedding], b: &[Embedding], threshold: f64) -> Result<f64> {
    let accepted = accepted_pairs(a, b, threshold)?;
    Ok((a.len() - accepted) as f64 / a.len() as f64)
}

/// Fraction of aligned pairs that pass verification.
pub fn accept_rate(a: &[Embedding], b: &[Embedding], threshold: f64) -> Result<f64> {
    Ok(accepted_pairs(a, b, threshold)? as f64 / a.len() as f64)
}

fn embed_all<E: SpeakerEncoder>(xs: &[AudioBuffer], encoder: &E) -> Result<Vec<Embedding>> {
    xs.par_iter().map(|x| encoder.embed(&x.samples)).collect()
}

fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{a} and {b} inputs are not aligned")));
    }
    Ok(())
}

/// Clones failing verification against the protected audio they came from.
pub fn spr<E: SpeakerEncoder>(protected: &[AudioBuffer], cloned: &[AudioBuffer], threshold: f64, encoder: &E) -> Result<f64> {
    check_aligned(protected.len(), cloned.len())?;
    reject_rate(&embed_all(protected, encoder)?, &embed_all(cloned, encoder)?, threshold)
}

/// Clones failing verification against the unprotected originals.
pub fn dpr<E: SpeakerEncoder>(originals: &[AudioBuffer], cloned: &[AudioBuffer], threshold: f64, encoder: &E) -> Result<f64> {
    check_aligned(originals.len(), cloned.len())?;
    reject_rate(&embed_all(originals, encoder)?, &embed_all(cloned, encoder)?, threshold)
}

/// Fakes passing verification against their sources.
pub fn match_rate<E: SpeakerEncoder>(sources: &[AudioBuffer], fakes: &[AudioBuffer], threshold: f64, encoder: &E) -> Result<f64> {
    check_aligned(sources.len(), fakes.len())?;
    accept_rate(&embed_all(sources, encoder)?, &embed_all(fakes, encoder)?, threshold)
}

/// Fraction of inputs that no longer verify against themselves after
/// deploy-mode protection with `u`.
pub fn evasion_rate<E: SpeakerEncoder>(originals: &[AudioBuffer], u: &Ufp, threshold: f64, encoder: &E) -> Result<f64> {
    let clean = embed_all(originals, encoder)?;
    evasion_rate_with(originals, &clean, u, threshold, encoder)
}

/// As [`evasion_rate`] with precomputed clean embeddings.
pub fn evasion_rate_with<E: SpeakerEncoder>(
    originals: &[AudioBuffer],
    clean: &[Embedding],
    u: &Ufp,
    threshold: f64,
    encoder: &E,
) -> Result<f64> {
    check_aligned(originals.len(), clean.len())?;
    let protected: Vec<Embedding> = originals
        .par_iter()
        .map(|x| encoder.embed(&ufp::protect(x, u)?.samples))
        .collect::<Result<_>>()?;
    reject_rate(clean, &protected, threshold)
}

/// Load audio for scoring, resampled to the working rate.
pub fn load_for_scoring(path: &Path) -> Result<AudioBuffer> {
    let buf = audio::read_wav(path)?;
    if buf.sample_rate == SAMPLE_RATE {
        Ok(buf)
    } else {
        audio::resample(&buf, SAMPLE_RATE)
    }
}

/// Embeddings keyed by file path and encoder fingerprint, shared across threads.
pub struct EmbeddingCache<'a, E: SpeakerEncoder> {
    encoder: &'a E,
    entries: Mutex<HashMap<(PathBuf, u64), Embedding>>,
}

impl<'a, E: SpeakerEncoder> EmbeddingCache<'a, E> {
    pub fn new(encoder: &'a E) -> Self {
        Self {
            encoder,
            entries: Mutex::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn embed_path(&self, path: &Path) -> Result<Embedding> {
        let key = (path.to_path_buf(), self.encoder.fingerprint());
        if let Some(e) = self.entries.lock().expect("cache lock").get(&key) {
            return Ok(e.clone());
        }
        let e = self.encoder.embed(&load_for_scoring(path)?.samples)?;
        self.entries.lock().expect("cache lock").insert(key, e.clone());
        Ok(e)
    }

    pub fn embed_paths(&self, paths: &[PathBuf]) -> Result<Vec<Embedding>> {
        paths.par_iter().map(|p| self.embed_path(p)).collect()
    }

    pub fn score_trials(&self, trials: &[Trial]) -> Result<Vec<ScoredTrial>> {
        let mut unique: Vec<PathBuf> = trials.iter().flat_map(|t| [t.path_a.clone(), t.path_b.clone()]).collect();
        unique.sort();
        unique.dedup();
        self.embed_paths(&unique)?;
        trials
            .iter()
            .map(|t| {
                let a = self.embed_path(&t.path_a)?;
                let b = self.embed_path(&t.path_b)?;
                Ok(ScoredTrial {
                    score: cosine_similarity(&a, &b)?,
                    same_speaker: t.same_speaker,
                    weight: t.weight,
                })
            })
            .collect()
    }
}

/// Pair the WAV files of `a` and `b` by file name. Every file must have a
/// partner; the error lists the ones that do not.
pub fn align_dirs(a: &Path, b: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let name = |p: &PathBuf| p.file_name().map(|n| n.to_os_string());
    let la = audio::list_wavs(a)?;
    let lb = audio::list_wavs(b)?;
    let names_b: std::collections::HashSet<_> = lb.iter().filter_map(name).collect();
    let names_a: std::collections::HashSet<_> = la.iter().filter_map(name).collect();
    let mut unmatched: Vec<String> = la
        .iter()
        .filter(|p| !name(p).is_some_and(|n| names_b.contains(&n)))
        .chain(lb.iter().filter(|p| !name(p).is_some_and(|n| names_a.contains(&n))))
        .map(|p| p.display().to_string())
        .collect();
    if !unmatched.is_empty() {
        unmatched.sort();
        return Err(Error::ShapeMismatch(format!(
            "{} and {} are not aligned; unmatched: {}",
            a.display(),
            b.display(),
            unmatched.join(", ")
        )));
    }
    if la.is_empty() {
        return Err(invalid(format!("no .wav files in {}", a.display())));
    }
    Ok(la
        .into_iter()
        .map(|p| {
            let q = b.join(p.file_name().expect("listed files have names"));
            (p, q)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub eer: Option<f64>,
    pub threshold: f64,
    pub spr: Option<f64>,
    pub dpr: Option<f64>,
    pub match_rate: Option<f64>,
    pub evasion_rate: Option<f64>,
    pub seg_snr_db: Option<f64>,
    pub rtc: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

impl EvalReport {
    pub fn rows(&self) -> Vec<(&'static str, String)> {
        vec![
            ("eer", cell(self.eer)),
            ("threshold", format!("{:.4}", self.threshold)),
            ("spr", cell(self.spr)),
            ("dpr", cell(self.dpr)),
            ("match_rate", cell(self.match_rate)),
            ("evasion_rate", cell(self.evasion_rate)),
            ("seg_snr_db", cell(self.seg_snr_db)),
            ("rtc", cell(self.rtc)),
        ]
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.rows() {
            let _ = writeln!(out, "{k:<14} {v:>10}");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RtcPoint {
    pub duration_s: f64,
    pub median_s: f64,
    pub rtc: f64,
}

/// Median deploy-mode tiler time over `reps` (at least 5) runs on seeded
/// noise of each duration, divided by the duration. Durations shorter than
/// one UFP segment are timed through the same pipeline with no segment added.
pub fn rtc_benchmark(durations: &[f64], u: &Ufp, reps: usize, seed: u64) -> Result<Vec<RtcPoint>> {
    let reps = reps.max(5);
    durations
        .iter()
        .map(|&d| {
            if !(d > 0.0 && d.is_finite()) {
                return Err(invalid(format!("benchmark duration must be positive, got {d}")));
            }
            let n = (d * SAMPLE_RATE as f64).round() as usize;
            let mut r = rng::rng_for(seed, &format!("rtc:{d}"));
            let x = AudioBuffer::new((0..n).map(|_| 0.1 * r.sample::<f64, _>(StandardNormal)).collect(), SAMPLE_RATE)?;
            ufp::protect_any_length(&x, u)?;
            let mut times: Vec<f64> = (0..reps)
                .map(|_| {
                    let t0 = Instant::now();
                    let y = ufp::protect_any_length(&x, u);
                    let dt = t0.elapsed().as_secs_f64();
                    y.map(|_| dt)
                })
                .collect::<Result<_>>()?;
            times.sort_by(f64::total_cmp);
            let median_s = times[times.len() / 2];
            Ok(RtcPoint {
                duration_s: d,
                median_s,
                rtc: median_s / d,
            })
        })
        .collect()
}

pub const SEG_SNR_FRAME_S: f64 = 0.03;
pub const SEG_SNR_MIN_DB: f64 = -10.0;
pub const SEG_SNR_MAX_DB: f64 = 35.0;
const SILENCE_ENERGY: f64 = 1e-10;

/// Mean per-frame SNR over non-overlapping 30 ms frames, each clamped to
/// [-10, 35] dB. Frames with reference energy below 1e-10 are skipped, as is
/// a trailing partial frame.
pub fn segmental_snr(x: &AudioBuffer, y: &AudioBuffer) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("lengths {} and {}", x.len(), y.len())));
    }
    let frame = (SEG_SNR_FRAME_S * x.sample_rate as f64).round() as usize;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in x.samples.chunks_exact(frame).zip(y.samples.chunks_exact(frame)) {
        let e: f64 = a.iter().map(|v| v * v).sum();
        if e < SILENCE_ENERGY {
            continue;
        }
        let d: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
        let db = if d == 0.0 { SEG_SNR_MAX_DB } else { 10.0 * (e / d).log10() };
        sum += db.clamp(SEG_SNR_MIN_DB, SEG_SNR_MAX_DB);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Undefined("segmental SNR: every frame is silent".into()));
    }
    Ok(sum / count as f64)
}

/// Integer with comma thousands separators.
pub fn with_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEfficiency {
    pub bins: usize,
    pub frame_len: usize,
    pub audio_seconds: f64,
    pub p_freq: u64,
    pub p_time: u64,
    pub ratio: f64,
}

impl ParamEfficiency {
    pub fn to_text(&self) -> String {
        format!(
            "P_freq = 2 x {} bins x {} frames = {}\nP_time = {} s x {} Hz = {}\nratio  = {:.4}\n",
            self.bins,
            self.frame_len,
            with_thousands(self.p_freq),
            self.audio_seconds,
            SAMPLE_RATE,
            with_thousands(self.p_time),
            self.ratio
        )
    }
}

/// Parameter count of a frequency-domain perturbation against a waveform
/// perturbation covering `audio_seconds` of audio.
pub fn param_efficiency_report(stft: &StftParams, frame_len: usize, audio_seconds: f64) -> Result<ParamEfficiency> {
    stft.validate()?;
    if frame_len == 0 {
        return Err(invalid("frame_len must be at least 1"));
    }
    if !(audio_seconds > 0.0 && audio_seconds.is_finite()) {
        return Err(invalid(format!("audio_seconds must be positive, got {audio_seconds}")));
    }
    let bins = stft.bins();
    let p_freq = 2 * (bins * frame_len) as u64;
    let p_time = (audio_seconds * SAMPLE_RATE as f64).round() as u64;
    Ok(ParamEfficiency {
        bins,
        frame_len,
        audio_seconds,
        p_freq,
        p_time,
        ratio: p_freq as f64 / p_time as f64,
    })
}

/// Amplitude of the syllabic envelope at its troughs, relative to its peaks.
pub const ENVELOPE_FLOOR: f64 = 0.3;

/// Parametric voice of one synthetic speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Voice {
    pub f0: f64,
    /// Centre frequency and bandwidth of each resonance, in Hz.
    pub formants: Vec<(f64, f64)>,
    pub formant_gains: Vec<f64>,
    /// Harmonic amplitudes fall as `h^-tilt`.
    pub tilt: f64,
    pub vibrato_rate: f64,
    pub vibrato_depth: f64,
    pub breath: f64,
}

impl Voice {
    pub fn draw(seed: u64, speaker: usize) -> Self {
        let mut r = rng::rng_for(seed, &format!("voice:{speaker}"));
        let formants = [(250.0, 900.0), (900.0, 2300.0), (2200.0, 3400.0), (3300.0, 4600.0)]
            .iter()
            .map(|&(lo, hi)| (r.random_range(lo..hi), r.random_range(60.0..180.0)))
            .collect();
        let formant_gains = (0..4).map(|i| r.random_range(0.4..1.0) / (1.0 + i as f64 * 0.5)).collect();
        Self {
            f0: r.random_range(85.0..260.0),
            formants,
            formant_gains,
            tilt: r.random_range(0.5..1.5),
            vibrato_rate: r.random_range(4.0..7.0),
            vibrato_depth: r.random_range(0.005..0.02),
            breath: r.random_range(0.002..0.01),
        }
    }

    fn envelope(&self, f: f64, shift: f64) -> f64 {
        let mut g = 0.03;
        for ((c, bw), a) in self.formants.iter().zip(&self.formant_gains) {
            let d = (f - c * shift) / bw;
            g += a / (1.0 + d * d);
        }
        g
    }

    /// One utterance of `n` samples.
    pub fn utterance(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::rng_from(seed);
        let sr = SAMPLE_RATE as f64;
        let drift_rate = [r.random_range(0.2..0.6), r.random_range(0.7..1.5)];
        let drift_phase = [r.random_range(0.0..2.0 * PI), r.random_range(0.0..2.0 * PI)];
        let drift_depth = r.random_range(0.03..0.08);
        let syllable_rate = r.random_range(3.0..5.0);
        let syllable_phase = r.random_range(0.0..2.0 * PI);
        let vowel_rate = r.random_range(1.0..2.5);
        let vowel_phase = r.random_range(0.0..2.0 * PI);
        let vib_phase = r.random_range(0.0..2.0 * PI);
        let gain = r.random_range(0.15..0.3);
        let f0_offset = r.random_range(-0.04..0.04);
        let breath = Normal::new(0.0, self.breath).expect("finite std");
        let floor = Normal::new(0.0, 0.0005).expect("finite std");

        let max_harmonic = (7600.0 / (self.f0 * 0.85)).ceil() as usize + 1;
        let tilt: Vec<f64> = (0..=max_harmonic).map(|h| (h.max(1) as f64).powf(-self.tilt)).collect();
        let mut phase = 0.0f64;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let t = i as f64 / sr;
            let drift = drift_depth
                * (0.6 * (2.0 * PI * drift_rate[0] * t + drift_phase[0]).sin()
                    + 0.4 * (2.0 * PI * drift_rate[1] * t + drift_phase[1]).sin());
            let vib = self.vibrato_depth * (2.0 * PI * self.vibrato_rate * t + vib_phase).sin();
            let f0 = self.f0 * (1.0 + f0_offset + drift + vib);
            phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI * 1024.0);
            let shift = 1.0 + 0.06 * (2.0 * PI * vowel_rate * t + vowel_phase).sin();
            let mut v = 0.0;
            let mut h = 1;
            while (h as f64) * f0 < 7600.0 && h < tilt.len() {
                let f = h as f64 * f0;
                v += self.envelope(f, shift) * tilt[h] * (h as f64 * phase).sin();
                h += 1;
            }
            let syl = 0.5 * (1.0 + (2.0 * PI * syllable_rate * t + syllable_phase).sin());
            let env = ENVELOPE_FLOOR + (1.0 - ENVELOPE_FLOOR) * syl;
            out.push(env * (v + breath.sample(&mut r)) + floor.sample(&mut r));
        }
        let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        out.iter().map(|v| v * gain / peak).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub file: String,
    pub speaker: usize,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const TRIALS_FILE: &str = "trials.txt";
pub const CORPUS_TRIALS: usize = 500;

/// Write `spkXX_uttYY.wav` files, `manifest.tsv` and a balanced
/// `trials.txt` under `dir`.
pub fn generate_synthetic_corpus(
    dir: &Path,
    n_speakers: usize,
    utts_per_speaker: usize,
    duration_s: f64,
    seed: u64,
) -> Result<Vec<CorpusEntry>> {
    if n_speakers < 2 {
        return Err(invalid(format!("need at least 2 speakers, got {n_speakers}")));
    }
    if utts_per_speaker < 2 {
        return Err(invalid(format!("need at least 2 utterances per speaker, got {utts_per_speaker}")));
    }
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(invalid(format!("duration must be positive, got {duration_s}")));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let voices: Vec<Voice> = (0..n_speakers).map(|s| Voice::draw(seed, s)).collect();
    let entries: Vec<CorpusEntry> = (0..n_speakers)
        .flat_map(|s| {
            (0..utts_per_speaker).map(move |u| CorpusEntry {
                file: format!("spk{s:02}_utt{u:02}.wav"),
                speaker: s,
            })
        })
        .collect();
    entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let samples = voices[e.speaker].utterance(n, rng::derive_seed(seed, &format!("utterance:{i}")));
            let buf = AudioBuffer::new(samples, SAMPLE_RATE)?;
            audio::write_wav(&buf, dir.join(&e.file)).map(|_| ())
        })
        .collect::<Result<()>>()?;

    let mut manifest = String::from("file\tspeaker\n");
    for e in &entries {
        let _ = writeln!(manifest, "{}\tspk{:02}", e.file, e.speaker);
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;

    let trials = make_trials(&entries, CORPUS_TRIALS, seed)?;
    let trials_path = dir.join(TRIALS_FILE);
    std::fs::write(&trials_path, format_trials(&trials)).map_err(|e| Error::io(&trials_path, e))?;
    Ok(entries)
}

/// Read a manifest written by [`generate_synthetic_corpus`].
pub fn read_manifest(path: &Path) -> Result<Vec<CorpusEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (file, spk) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "expected <file>\\t<speaker>".into(),
        })?;
        let speaker = spk
            .trim()
            .trim_start_matches("spk")
            .parse()
            .map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("bad speaker id {spk:?}"),
            })?;
        out.push(CorpusEntry {
            file: file.to_string(),
            speaker,
        });
    }
    Ok(out)
}

/// Half same-speaker, half different-speaker pairs of distinct files, drawn
/// with a seeded generator. Paths are the entries' file names.
pub fn make_trials(entries: &[CorpusEntry], n_trials: usize, seed: u64) -> Result<Vec<Trial>> {
    let mut by_speaker: HashMap<usize, Vec<&CorpusEntry>> = HashMap::new();
    for e in entries {
        by_speaker.entry(e.speaker).or_default().push(e);
    }
    let mut speakers: Vec<usize> = by_speaker.keys().copied().collect();
    speakers.sort_unstable();
    if speakers.len() < 2 || by_speaker.values().all(|v| v.len() < 2) {
        return Err(invalid("trial generation needs two speakers and a speaker with two files"));
    }
    let multi: Vec<usize> = speakers.iter().copied().filter(|s| by_speaker[s].len() >= 2).collect();
    let mut r = rng::rng_for(seed, "trials");
    let mut trials = Vec::with_capacity(n_trials);
    for i in 0..n_trials {
        let (a, b, same) = if i % 2 == 0 {
            let s = multi[r.random_range(0..multi.len())];
            let files = &by_speaker[&s];
            let a = r.random_range(0..files.len());
            let mut b = r.random_range(0..files.len() - 1);
            if b >= a {
                b += 1;
            }
            (files[a], files[b], true)
        } else {
            let sa = r.random_range(0..speakers.len());
            let mut sb = r.random_range(0..speakers.len() - 1);
            if sb >= sa {
                sb += 1;
            }
            let fa = &by_speaker[&speakers[sa]];
            let fb = &by_speaker[&speakers[sb]];
            (fa[r.random_range(0..fa.len())], fb[r.random_range(0..fb.len())], false)
        };
        trials.push(Trial {
            path_a: PathBuf::from(&a.file),
            path_b: PathBuf::from(&b.file),
            same_speaker: same,
            weight: 1.0,
        });
    }
    Ok(trials)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, SurrogateEncoder};

    fn scored(score: f64, same: bool) -> ScoredTrial {
        ScoredTrial {
            score,
            same_speaker: same,
            weight: 1.0,
        }
    }

    #[test]
    fn parse_trial_lines() {
        let text = "# header\na.wav b.wav 1\n\n/abs/c.wav d.wav 0 2.5 # tail\n";
        let t = parse_trials(text, Some(Path::new("/base"))).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].path_a, PathBuf::from("/base/a.wav"));
        assert!(t[0].same_speaker);
        assert_eq!(t[0].weight, 1.0);
        assert_eq!(t[1].path_a, PathBuf::from("/abs/c.wav"));
        assert_eq!(t[1].weight, 2.5);
        let round = parse_trials(&format_trials(&t), None).unwrap();
        assert_eq!(round, t);
    }

    #[test]
    fn parse_trial_errors_name_the_line() {
        for bad in ["a b 2", "a b", "a b 1 -1", "a b 1 x", "a b 1 1 1"] {
            match parse_trials(&format!("# ok\n{bad}\n"), None) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, 2, "{bad}"),
                other => panic!("{bad}: {other:?}"),
            }
        }
    }

    #[test]
    fn separable_scores_give_zero_eer() {
        let trials: Vec<ScoredTrial> = (0..10)
            .map(|i| scored(i as f64 / 10.0, i >= 5))
            .collect();
        let p = compute_eer_threshold(&trials).unwrap();
        assert_eq!(p.eer, 0.0);
        assert!(p.threshold > 0.4 && p.threshold <= 0.5, "{}", p.threshold);
    }

    #[test]
    fn single_class_is_error() {
        let trials = vec![scored(0.1, true), scored(0.2, true)];
        assert!(compute_eer_threshold(&trials).is_err());
        assert!(compute_eer_threshold(&[]).is_err());
    }

    #[test]
    fn chance_level_scores() {
        let mut r = rng::rng_from(9);
        let trials: Vec<ScoredTrial> = (0..10_000).map(|_| scored(r.random::<f64>(), r.random::<bool>())).collect();
        let p = compute_eer_threshold(&trials).unwrap();
        assert!((p.eer - 0.5).abs() <= 0.02, "{}", p.eer);
    }

    #[test]
    fn ties_pick_the_lowest_threshold() {
        // Rejecting one trial or two both give |FNR - FPR| = 0.5.
        let trials = vec![scored(0.0, true), scored(1.0, false), scored(2.0, true)];
        let p = compute_eer_threshold(&trials).unwrap();
        assert_eq!(p.threshold, 0.5);
        assert_eq!((p.fnr, p.fpr, p.eer), (0.5, 1.0, 0.75));
    }

    #[test]
    fn weights_enter_the_rates() {
        let trials = vec![
            ScoredTrial { score: 0.1, same_speaker: true, weight: 3.0 },
            ScoredTrial { score: 0.2, same_speaker: false, weight: 1.0 },
            ScoredTrial { score: 0.9, same_speaker: true, weight: 1.0 },
        ];
        let p = compute_eer_threshold(&trials).unwrap();
        // Rejecting the heavy positive costs FNR 0.75 against FPR 1.
        assert!((p.threshold - 0.15).abs() < 1e-15);
        assert_eq!((p.fnr, p.fpr), (0.75, 1.0));
    }

    #[test]
    fn segmental_snr_cases() {
        let mut r = rng::rng_from(4);
        let x: Vec<f64> = (0..4800).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let xb = AudioBuffer::new(x.clone(), SAMPLE_RATE).unwrap();
        assert_eq!(segmental_snr(&xb, &xb).unwrap(), 35.0);

        // Per-frame noise with exactly the frame's energy gives 0 dB.
        let mut y = x.clone();
        for chunk in y.chunks_mut(480) {
            let e: f64 = chunk.iter().map(|v| v * v).sum();
            let n: Vec<f64> = (0..chunk.len()).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            let en: f64 = n.iter().map(|v| v * v).sum();
            for (c, v) in chunk.iter_mut().zip(&n) {
                *c += v * (e / en).sqrt();
            }
        }
        let snr = segmental_snr(&xb, &AudioBuffer::new(y, SAMPLE_RATE).unwrap()).unwrap();
        assert!(snr.abs() < 1e-9, "{snr}");

        let silent = AudioBuffer::new(vec![0.0; 4800], SAMPLE_RATE).unwrap();
        assert!(matches!(segmental_snr(&silent, &xb), Err(Error::Undefined(_))));
        let short = AudioBuffer::new(vec![0.0; 10], SAMPLE_RATE).unwrap();
        assert!(matches!(segmental_snr(&short, &xb), Err(Error::ShapeMismatch(_))));

        let far = AudioBuffer::new(x.iter().map(|v| v * -100.0).collect(), SAMPLE_RATE).unwrap();
        assert_eq!(segmental_snr(&xb, &far).unwrap(), -10.0);
    }

    #[test]
    fn param_report_arithmetic() {
        let r = param_efficiency_report(&StftParams::default(), 120, 64.0).unwrap();
        assert_eq!(r.p_freq, 123_120);
        assert_eq!(r.p_time, 1_024_000);
        assert!((r.ratio - 0.120_234_375).abs() < 1e-12);
        assert!(r.to_text().contains("123,120"));
        assert!(param_efficiency_report(&StftParams::default(), 0, 1.0).is_err());
        assert_eq!(with_thousands(0), "0");
        assert_eq!(with_thousands(999), "999");
        assert_eq!(with_thousands(1_000), "1,000");
        assert_eq!(with_thousands(1_234_567), "1,234,567");
    }

    #[test]
    fn complement_is_exact() {
        for n in 1..=400usize {
            for a in 0..=n {
                assert_eq!(a as f64 / n as f64 + (n - a) as f64 / n as f64, 1.0, "{a}/{n}");
            }
        }
    }

    #[test]
    fn make_trials_is_balanced_and_seeded() {
        let entries: Vec<CorpusEntry> = (0..3)
            .flat_map(|s| (0..4).map(move |u| CorpusEntry { file: format!("{s}_{u}"), speaker: s }))
            .collect();
        let t = make_trials(&entries, 100, 5).unwrap();
        assert_eq!(t.iter().filter(|t| t.same_speaker).count(), 50);
        assert!(t.iter().all(|t| t.path_a != t.path_b));
        for tr in &t {
            let sa = &tr.path_a.to_str().unwrap()[..1];
            let sb = &tr.path_b.to_str().unwrap()[..1];
            assert_eq!(sa == sb, tr.same_speaker);
        }
        assert_eq!(make_trials(&entries, 100, 5).unwrap(), t);
        assert_ne!(make_trials(&entries, 100, 6).unwrap(), t);
    }

    #[test]
    fn sv_decide_degenerate_thresholds() {
        let enc = SurrogateEncoder::new(EncoderConfig::default()).unwrap();
        let v = Voice::draw(1, 0);
        let x = AudioBuffer::new(v.utterance(16000, 3), SAMPLE_RATE).unwrap();
        let y = AudioBuffer::new(Voice::draw(1, 1).utterance(16000, 4), SAMPLE_RATE).unwrap();
        assert!(sv_decide(&x, &x, 1.0, &enc).unwrap());
        assert!(sv_decide(&x, &y, -1.0, &enc).unwrap());
        assert!(!sv_decide(&x, &x, 1.0 + 1e-9, &enc).unwrap());
    }
}
