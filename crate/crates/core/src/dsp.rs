//! STFT analysis and weighted overlap-add synthesis, their adjoints, and the
//! HTK mel filterbank.
//!
//! Frames are interior-aligned with no edge padding: frame `m` covers samples
//! `[m * hop, m * hop + n_fft)`. Spectrograms are stored frame-major.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WindowKind {
    /// Periodic Hann, `0.5 * (1 - cos(2 pi n / N))`.
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StftParams {
    pub n_fft: usize,
    pub hop: usize,
    pub window: WindowKind,
}

impl Default for StftParams {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            hop: 256,
            window: WindowKind::Hann,
        }
    }
}

impl StftParams {
    pub fn new(n_fft: usize, hop: usize) -> Result<Self> {
        let p = Self {
            n_fft,
            hop,
            window: WindowKind::Hann,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 4 || !self.n_fft.is_multiple_of(2) {
            return Err(invalid(format!("n_fft must be even and >= 4, got {}", self.n_fft)));
        }
        if self.hop == 0 || !self.n_fft.is_multiple_of(self.hop) {
            return Err(invalid(format!(
                "hop {} must be positive and divide n_fft {}",
                self.hop, self.n_fft
            )));
        }
        Ok(())
    }

    /// Number of onesided frequency bins, `n_fft / 2 + 1`.
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frame count for a signal of `len` samples, if at least one frame fits.
    pub fn frames(&self, len: usize) -> Option<usize> {
        (len >= self.n_fft).then(|| 1 + (len - self.n_fft) / self.hop)
    }

    /// Samples covered by `frames` frames.
    pub fn covered_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            self.n_fft + (frames - 1) * self.hop
        }
    }

    pub fn window(&self) -> Vec<f64> {
        match self.window {
            WindowKind::Hann => (0..self.n_fft)
                .map(|n| 0.5 * (1.0 - (2.0 * PI * n as f64 / self.n_fft as f64).cos()))
                .collect(),
        }
    }

    /// Squared-window overlap sum `sum_m w[n - m hop]^2` over `frames` frames.
    pub fn window_square_envelope(&self, frames: usize) -> Vec<f64> {
        let w = self.window();
        let mut env = vec![0.0; self.covered_len(frames)];
        for m in 0..frames {
            for (t, wt) in w.iter().enumerate() {
                env[m * self.hop + t] += wt * wt;
            }
        }
        env
    }

    /// Sample range where every overlapping frame is present, so the squared
    /// window envelope is at its constant interior value.
    pub fn interior(&self, frames: usize) -> std::ops::Range<usize> {
        if frames == 0 {
            return 0..0;
        }
        let overlap = self.n_fft - self.hop;
        let end = self.covered_len(frames) - overlap;
        overlap.min(end)..end
    }
}

/// Complex spectrogram, `frames x bins`, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    frames: usize,
    pub params: StftParams,
}

impl Spectrogram {
    pub fn zeros(params: StftParams, frames: usize) -> Self {
        let n = params.bins() * frames;
        Self {
            re: vec![0.0; n],
            im: vec![0.0; n],
            frames,
            params,
        }
    }

    pub fn from_parts(params: StftParams, frames: usize, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        let n = params.bins() * frames;
        if re.len() != n || im.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "expected {n} entries per plane, got {} and {}",
                re.len(),
                im.len()
            )));
        }
        Ok(Self {
            re,
            im,
            frames,
            params,
        })
    }

    pub fn bins(&self) -> usize {
        self.params.bins()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    #[inline]
    pub fn index(&self, frame: usize, bin: usize) -> usize {
        frame * self.bins() + bin
    }

    pub fn get(&self, frame: usize, bin: usize) -> Complex<f64> {
        let i = self.index(frame, bin);
        Complex::new(self.re[i], self.im[i])
    }

    /// `sum |S|^2` over all entries.
    pub fn energy(&self) -> f64 {
        self.re.iter().zip(&self.im).map(|(r, i)| r * r + i * i).sum()
    }

    /// Real inner product treating (re, im) as independent coordinates.
    pub fn dot(&self, other: &Spectrogram) -> f64 {
        self.re.iter().zip(&other.re).map(|(a, b)| a * b).sum::<f64>()
            + self.im.iter().zip(&other.im).map(|(a, b)| a * b).sum::<f64>()
    }

    fn check_shape(&self, params: &StftParams) -> Result<()> {
        if self.params != *params {
            return Err(Error::ShapeMismatch(format!(
                "spectrogram parameters {:?} differ from {:?}",
                self.params, params
            )));
        }
        Ok(())
    }
}

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (planner, cache) = &mut *guard;
        cache
            .entry((n, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(n)
                } else {
                    planner.plan_fft_forward(n)
                }
            })
            .clone()
    })
}

pub fn stft(x: &[f64], p: &StftParams) -> Result<Spectrogram> {
    p.validate()?;
    let frames = p.frames(x.len()).ok_or_else(|| {
        Error::TooShort(format!(
            "{} samples is shorter than one {}-sample window",
            x.len(),
            p.n_fft
        ))
    })?;
    let n = p.n_fft;
    let bins = p.bins();
    let w = p.window();
    let fft = plan(n, false);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = Spectrogram::zeros(*p, frames);
    for m in 0..frames {
        let seg = &x[m * p.hop..m * p.hop + n];
        for ((b, &s), &wt) in buf.iter_mut().zip(seg).zip(&w) {
            *b = Complex::new(s * wt, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        let base = m * bins;
        for k in 0..bins {
            out.re[base + k] = buf[k].re;
            out.im[base + k] = buf[k].im;
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of [`stft`]: maps a spectrogram gradient to a
/// gradient over `len` input samples.
pub fn stft_adjoint(grad: &Spectrogram, p: &StftParams, len: usize) -> Result<Vec<f64>> {
    grad.check_shape(p)?;
    if p.frames(len) != Some(grad.frames()) {
        return Err(Error::ShapeMismatch(format!(
            "{} frames do not match a {len}-sample signal",
            grad.frames()
        )));
    }
    let n = p.n_fft;
    let bins = p.bins();
    let w = p.window();
    let ifft = plan(n, true);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut scratch = vec![Complex::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let mut out = vec![0.0; len];
    for m in 0..grad.frames() {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        let base = m * bins;
        for k in 0..bins {
            buf[k] = Complex::new(grad.re[base + k], grad.im[base + k]);
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let seg = &mut out[m * p.hop..m * p.hop + n];
        for ((o, b), &wt) in seg.iter_mut().zip(&buf).zip(&w) {
            *o += wt * b.re;
        }
    }
    Ok(out)
}

/// How overlap-add output is normalised by the squared-window envelope.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Normalization {
    /// Divide by the envelope wherever it is nonzero.
    Exact,
    /// Divide by `max(envelope, floor * max_envelope)`.
    Floored(f64),
}

/// Envelope floor used when resynthesizing modified spectrograms. Keeps the
/// edge samples, where few frames overlap, from amplifying modifications.
pub const SYNTHESIS_FLOOR: f64 = 0.1;

fn denominators(p: &StftParams, frames: usize, norm: Normalization) -> (Vec<f64>, Vec<f64>) {
    let env = p.window_square_envelope(frames);
    let denom = match norm {
        Normalization::Exact => env
            .iter()
            .map(|&e| if e > 0.0 { e } else { f64::INFINITY })
            .collect(),
        Normalization::Floored(ratio) => {
            let floor = ratio * env.iter().cloned().fold(0.0, f64::max);
            env.iter().map(|&e| e.max(floor)).collect()
        }
    };
    (env, denom)
}

fn overlap_add(s: &Spectrogram, norm: Normalization) -> Vec<f64> {
    let p = &s.params;
    let n = p.n_fft;
    let bins = p.bins();
    let w = p.window();
    let ifft = plan(n, true);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut scratch = vec![Complex::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let mut out = vec![0.0; p.covered_len(s.frames())];
    let scale = 1.0 / n as f64;
    for m in 0..s.frames() {
        let base = m * bins;
        // Hermitian extension; imaginary parts of DC and Nyquist do not
        // contribute to a real signal.
        buf[0] = Complex::new(s.re[base], 0.0);
        buf[n / 2] = Complex::new(s.re[base + n / 2], 0.0);
        for k in 1..n / 2 {
            let c = Complex::new(s.re[base + k], s.im[base + k]);
            buf[k] = c;
            buf[n - k] = c.conj();
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let seg = &mut out[m * p.hop..m * p.hop + n];
        for ((o, b), &wt) in seg.iter_mut().zip(&buf).zip(&w) {
            *o += wt * b.re * scale;
        }
    }
    let (_, denom) = denominators(p, s.frames(), norm);
    for (o, d) in out.iter_mut().zip(&denom) {
        *o /= d;
    }
    out
}

fn overlap_add_adjoint(
    grad: &[f64],
    p: &StftParams,
    frames: usize,
    norm: Normalization,
) -> Result<Spectrogram> {
    p.validate()?;
    let covered = p.covered_len(frames);
    if grad.len() < covered {
        return Err(Error::ShapeMismatch(format!(
            "gradient of {} samples is shorter than the {covered} samples covered by {frames} frames",
            grad.len()
        )));
    }
    let n = p.n_fft;
    let bins = p.bins();
    let w = p.window();
    let (_, denom) = denominators(p, frames, norm);
    let fft = plan(n, false);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = Spectrogram::zeros(*p, frames);
    for m in 0..frames {
        let off = m * p.hop;
        for t in 0..n {
            buf[t] = Complex::new(grad[off + t] * w[t] / denom[off + t], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        let base = m * bins;
        for k in 0..bins {
            let c = if k == 0 || k == n / 2 { 1.0 } else { 2.0 } / n as f64;
            out.re[base + k] = c * buf[k].re;
            out.im[base + k] = if k == 0 || k == n / 2 { 0.0 } else { c * buf[k].im };
        }
    }
    Ok(out)
}

/// Weighted overlap-add inverse with the analysis window as synthesis window,
/// normalised by the squared-window envelope. Output covers
/// `n_fft + (frames - 1) * hop` samples.
pub fn istft(s: &Spectrogram) -> Vec<f64> {
    overlap_add(s, Normalization::Exact)
}

/// Vector-Jacobian product of [`istft`].
pub fn istft_adjoint(grad: &[f64], p: &StftParams, frames: usize) -> Result<Spectrogram> {
    overlap_add_adjoint(grad, p, frames, Normalization::Exact)
}

/// Resynthesize a modified spectrogram onto the time grid of `reference`.
///
/// Interior samples equal [`istft`]. Near the edges the envelope is floored,
/// and the part of `reference` the floored synthesis does not reproduce is
/// added back, so an unmodified spectrogram returns `reference` everywhere.
/// Samples past the last frame are copied from `reference`.
pub fn resynthesize(s: &Spectrogram, reference: &[f64]) -> Result<Vec<f64>> {
    let covered = s.params.covered_len(s.frames());
    if reference.len() < covered {
        return Err(Error::ShapeMismatch(format!(
            "reference of {} samples is shorter than the {covered} covered samples",
            reference.len()
        )));
    }
    let norm = Normalization::Floored(SYNTHESIS_FLOOR);
    let mut out = overlap_add(s, norm);
    let (env, denom) = denominators(&s.params, s.frames(), norm);
    for i in 0..covered {
        out[i] += reference[i] * (1.0 - env[i] / denom[i]);
    }
    out.extend_from_slice(&reference[covered..]);
    Ok(out)
}

/// Vector-Jacobian product of [`resynthesize`] with respect to the spectrogram.
pub fn resynthesize_adjoint(grad: &[f64], p: &StftParams, frames: usize) -> Result<Spectrogram> {
    overlap_add_adjoint(grad, p, frames, Normalization::Floored(SYNTHESIS_FLOOR))
}

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale spanning `[0, sr / 2]`, returned
/// row-major as `n_mels x bins`. Each triangle peaks at 1, so adjacent
/// filters sum to at most 1 at every bin.
pub fn mel_filterbank(p: &StftParams, n_mels: usize, sr: u32) -> Result<Vec<f64>> {
    if n_mels < 2 {
        return Err(invalid("n_mels must be at least 2"));
    }
    let bins = p.bins();
    let nyquist = sr as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * sr as f64 / p.n_fft as f64;
    let mut fb = vec![0.0; n_mels * bins];
    for j in 0..n_mels {
        let (lo, mid, hi) = (edges[j], edges[j + 1], edges[j + 2]);
        for k in 0..bins {
            let f = bin_hz(k);
            let v = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[j * bins + k] = v;
        }
    }
    Ok(fb)
}

/// Center frequencies (Hz) of the filters built by [`mel_filterbank`].
pub fn mel_centers(n_mels: usize, sr: u32) -> Vec<f64> {
    let mel_max = hz_to_mel(sr as f64 / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::rng::rng_from(seed);
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.3).collect()
    }

    fn random_spec(p: StftParams, frames: usize, seed: u64) -> Spectrogram {
        let mut rng = crate::rng::rng_from(seed);
        let n = p.bins() * frames;
        let re = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let im = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Spectrogram::from_parts(p, frames, re, im).unwrap()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn frame_count_formula() {
        let p = StftParams::default();
        assert_eq!(p.frames(16000), Some(59));
        assert_eq!(p.frames(1023), None);
        assert_eq!(p.bins(), 513);
    }

    #[test]
    fn zero_input_gives_zero_spectrogram() {
        let p = StftParams::default();
        let s = stft(&vec![0.0; 16000], &p).unwrap();
        assert_eq!((s.bins(), s.frames()), (513, 59));
        assert!(s.re.iter().chain(&s.im).all(|v| *v == 0.0));
        assert!(istft(&s).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn too_short_input() {
        let p = StftParams::default();
        assert!(matches!(stft(&[0.0; 100], &p), Err(Error::TooShort(_))));
    }

    #[test]
    fn bin_centered_sinusoid_concentrates_energy() {
        let p = StftParams::default();
        let k = 40;
        let x: Vec<f64> = (0..8192)
            .map(|n| (2.0 * PI * k as f64 * n as f64 / p.n_fft as f64).cos())
            .collect();
        let s = stft(&x, &p).unwrap();
        let total = s.energy();
        let bin: f64 = (0..s.frames())
            .map(|m| s.get(m, k).norm_sqr())
            .sum();
        // Hann main lobe: 1 / (1 + 2 * 0.25) = 2/3 exactly; neighbours hold the rest.
        assert!(bin / total >= 0.66, "{}", bin / total);
        let lobe: f64 = (0..s.frames())
            .map(|m| (k - 1..=k + 1).map(|b| s.get(m, b).norm_sqr()).sum::<f64>())
            .sum();
        assert!(lobe / total >= 0.85);
    }

    #[test]
    fn cola_envelope_constant_in_interior() {
        let p = StftParams::default();
        let frames = 40;
        let env = p.window_square_envelope(frames);
        let r = p.interior(frames);
        for &e in &env[r] {
            assert!((e - 1.5).abs() < 1e-10);
        }
    }

    #[test]
    fn round_trip_reconstructs_interior() {
        let p = StftParams::default();
        let x = noise(32000, 3);
        let s = stft(&x, &p).unwrap();
        let y = istft(&s);
        let r = p.interior(s.frames());
        let err: f64 = r.clone().map(|i| (x[i] - y[i]).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = r.map(|i| x[i] * x[i]).sum::<f64>().sqrt();
        assert!(err / norm < 1e-6);
    }

    #[test]
    fn stft_of_istft_is_idempotent_on_range() {
        let p = StftParams::new(256, 64).unwrap();
        let x = noise(4000, 9);
        let s = stft(&x, &p).unwrap();
        let s2 = stft(&istft(&s), &p).unwrap();
        let diff: f64 = s.re.iter().zip(&s2.re).chain(s.im.iter().zip(&s2.im))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn stft_adjoint_identity() {
        let p = StftParams::new(256, 64).unwrap();
        for seed in 0..5 {
            let x = noise(3000, seed);
            let s = stft(&x, &p).unwrap();
            let g = random_spec(p, s.frames(), seed + 100);
            let lhs = s.dot(&g);
            let rhs = dot(&x, &stft_adjoint(&g, &p, x.len()).unwrap());
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} {rhs}");
        }
    }

    #[test]
    fn stft_adjoint_zero_and_single_entry() {
        let p = StftParams::new(64, 16).unwrap();
        let z = Spectrogram::zeros(p, 3);
        assert!(stft_adjoint(&z, &p, 96).unwrap().iter().all(|v| *v == 0.0));

        // A unit entry at (frame 1, bin k) pulls back to w[t] cos(2 pi k t / N) on frame 1.
        let k = 5;
        let mut g = Spectrogram::zeros(p, 3);
        let i = g.index(1, k);
        g.re[i] = 1.0;
        let out = stft_adjoint(&g, &p, 96).unwrap();
        let w = p.window();
        for (n, &v) in out.iter().enumerate() {
            let expect = if (16..80).contains(&n) {
                let t = n - 16;
                w[t] * (2.0 * PI * k as f64 * t as f64 / 64.0).cos()
            } else {
                0.0
            };
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn istft_adjoint_identity_and_scaling() {
        let p = StftParams::new(256, 64).unwrap();
        let frames = 30;
        let s = random_spec(p, frames, 1);
        let g = noise(p.covered_len(frames), 2);
        let lhs = dot(&istft(&s), &g);
        let adj = istft_adjoint(&g, &p, frames).unwrap();
        assert!((lhs - s.dot(&adj)).abs() < 1e-9 * lhs.abs().max(1.0));

        let g2: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
        let adj2 = istft_adjoint(&g2, &p, frames).unwrap();
        for (a, b) in adj.re.iter().zip(&adj2.re) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        let zero = istft_adjoint(&vec![0.0; g.len()], &p, frames).unwrap();
        assert!(zero.re.iter().chain(&zero.im).all(|v| *v == 0.0));
    }

    #[test]
    fn resynthesize_adjoint_identity_and_passthrough() {
        let p = StftParams::new(256, 64).unwrap();
        let x = noise(3000, 5);
        let s = stft(&x, &p).unwrap();
        let y = resynthesize(&s, &x).unwrap();
        let max_err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_err < 1e-9);

        let d = random_spec(p, s.frames(), 8);
        let zero = Spectrogram::zeros(p, s.frames());
        let base = resynthesize(&zero, &x).unwrap();
        let lin: Vec<f64> = resynthesize(&d, &x).unwrap().iter().zip(&base).map(|(a, b)| a - b).collect();
        let g = noise(x.len(), 6);
        let adj = resynthesize_adjoint(&g, &p, s.frames()).unwrap();
        let lhs = dot(&lin, &g);
        assert!((lhs - d.dot(&adj)).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn parseval_energy_consistency() {
        // With hop = n_fft / 4, every interior sample is covered by four frames
        // with sum w^2 = 1.5, and sum_k |X_k|^2 over the onesided bins relates to
        // the frame energy by Parseval once DC/Nyquist are counted once.
        let p = StftParams::default();
        let x = noise(20000, 4);
        let s = stft(&x, &p).unwrap();
        let n = p.n_fft as f64;
        let mut spec_energy = 0.0;
        for m in 0..s.frames() {
            for k in 0..s.bins() {
                let c = if k == 0 || k == s.bins() - 1 { 1.0 } else { 2.0 };
                spec_energy += c * s.get(m, k).norm_sqr() / n;
            }
        }
        let env = p.window_square_envelope(s.frames());
        let weighted: f64 = env.iter().zip(&x).map(|(e, v)| e * v * v).sum();
        assert!((spec_energy - weighted).abs() / weighted < 1e-6);
    }

    #[test]
    fn mel_scale_reference() {
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-9);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn filterbank_structure() {
        let p = StftParams::default();
        let n_mels = 40;
        let fb = mel_filterbank(&p, n_mels, 16000).unwrap();
        let bins = p.bins();
        for k in 0..bins {
            let col: f64 = (0..n_mels).map(|j| fb[j * bins + k]).sum();
            assert!(col <= 1.0 + 1e-9);
        }
        for j in 0..n_mels {
            assert!(fb[j * bins..(j + 1) * bins].iter().sum::<f64>() > 0.0);
        }
        let centers = mel_centers(n_mels, 16000);
        assert!(centers.windows(2).all(|w| w[0] < w[1]));
        assert!(*centers.last().unwrap() < 8000.0);
        assert!(mel_filterbank(&p, 1, 16000).is_err());
    }

    proptest::proptest! {
        #[test]
        fn stft_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, s1 in 0u64..500, s2 in 500u64..1000) {
            let p = StftParams::new(128, 32).unwrap();
            let x = noise(700, s1);
            let y = noise(700, s2);
            let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
            let (sx, sy, sm) = (stft(&x, &p).unwrap(), stft(&y, &p).unwrap(), stft(&mix, &p).unwrap());
            for i in 0..sm.re.len() {
                proptest::prop_assert!((sm.re[i] - a * sx.re[i] - b * sy.re[i]).abs() < 1e-9);
                proptest::prop_assert!((sm.im[i] - a * sx.im[i] - b * sy.im[i]).abs() < 1e-9);
            }
            let (ix, iy, im) = (istft(&sx), istft(&sy), istft(&sm));
            for i in 0..im.len() {
                proptest::prop_assert!((im[i] - a * ix[i] - b * iy[i]).abs() < 1e-9);
            }
        }
    }
}
