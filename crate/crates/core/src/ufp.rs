//! The perturbation itself, the frequency smoother and the tiler.
//!
//! A [`Ufp`] holds real and imaginary planes of shape `bins x frame_len`
//! (row-major, one row per frequency bin). The tiler smooths both planes
//! along the frame axis, splits the input spectrogram into
//! `floor(frames / frame_len)` segments and adds `noise_level * delta` to each
//! selected segment before resynthesis.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::dsp::{self, Spectrogram, StftParams, WindowKind};
use crate::error::{invalid, Error, Result};
use crate::rng;

pub const MAGIC: &[u8; 4] = b"UFP1";

#[derive(Debug, Clone, PartialEq)]
pub struct Ufp {
    pub delta_re: Vec<f64>,
    pub delta_im: Vec<f64>,
    pub frame_len: usize,
    pub noise_level: f64,
    pub stft: StftParams,
    pub smoother_k: usize,
}

impl Ufp {
    pub fn zeros(stft: StftParams, frame_len: usize, noise_level: f64, smoother_k: usize) -> Result<Self> {
        let n = stft.bins() * frame_len;
        let u = Self {
            delta_re: vec![0.0; n],
            delta_im: vec![0.0; n],
            frame_len,
            noise_level,
            stft,
            smoother_k,
        };
        u.validate()?;
        Ok(u)
    }

    /// Both planes drawn i.i.d. from N(0, 1).
    pub fn random(
        stft: StftParams,
        frame_len: usize,
        noise_level: f64,
        smoother_k: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut u = Self::zeros(stft, frame_len, noise_level, smoother_k)?;
        let mut rng = rng::rng_from(seed);
        for v in u.delta_re.iter_mut().chain(u.delta_im.iter_mut()) {
            *v = rng.sample(StandardNormal);
        }
        Ok(u)
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.frame_len == 0 {
            return Err(invalid("UFP frame length must be at least 1"));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(invalid(format!("noise level must be >= 0, got {}", self.noise_level)));
        }
        if self.smoother_k == 0 || self.smoother_k.is_multiple_of(2) {
            return Err(invalid(format!("smoother width must be odd, got {}", self.smoother_k)));
        }
        let n = self.bins() * self.frame_len;
        if self.delta_re.len() != n || self.delta_im.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "UFP planes must hold {} x {} entries",
                self.bins(),
                self.frame_len
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.stft.bins()
    }

    /// Learnable parameter count, `2 * bins * frame_len`.
    pub fn param_count(&self) -> usize {
        2 * self.bins() * self.frame_len
    }

    pub fn with_noise_level(&self, noise_level: f64) -> Self {
        Self {
            noise_level,
            ..self.clone()
        }
    }

    /// Euclidean norm over both planes.
    pub fn norm(&self) -> f64 {
        self.delta_re
            .iter()
            .chain(&self.delta_im)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Shortest input, in samples, that yields `frame_len` frames.
    pub fn min_samples(&self) -> usize {
        self.stft.covered_len(self.frame_len)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        for v in [
            self.bins(),
            self.frame_len,
            self.stft.n_fft,
            self.stft.hop,
            self.smoother_k,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&self.noise_level.to_le_bytes())?;
        let mut bytes = Vec::with_capacity(16 * self.delta_re.len());
        for v in self.delta_re.iter().chain(&self.delta_im) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let fmt = |m: &str| Error::Format(format!("UFP file: {m}"));
        let mut all = Vec::new();
        r.read_to_end(&mut all).map_err(|e| fmt(&e.to_string()))?;
        if all.len() < 32 || &all[..4] != MAGIC {
            return Err(fmt("missing UFP1 header"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(all[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (bins, frame_len, n_fft, hop, smoother_k) = (u32_at(0), u32_at(1), u32_at(2), u32_at(3), u32_at(4));
        let noise_level = f64::from_le_bytes(all[24..32].try_into().unwrap());
        let stft = StftParams {
            n_fft,
            hop,
            window: WindowKind::Hann,
        };
        stft.validate().map_err(|e| fmt(&e.to_string()))?;
        if stft.bins() != bins {
            return Err(fmt(&format!("{bins} bins inconsistent with n_fft {n_fft}")));
        }
        let n = bins * frame_len;
        let body = &all[32..];
        if body.len() != 16 * n {
            return Err(fmt(&format!("expected {} payload bytes, found {}", 16 * n, body.len())));
        }
        let vals: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let u = Self {
            delta_re: vals[..n].to_vec(),
            delta_im: vals[n..].to_vec(),
            frame_len,
            noise_level,
            stft,
            smoother_k,
        };
        u.validate()?;
        Ok(u)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        self.write_to(&mut bytes).expect("writing to memory");
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Shape and strength of a perturbation, independent of its values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UfpConfig {
    pub frame_len: usize,
    pub noise_level: f64,
    pub smoother_k: usize,
}

impl Default for UfpConfig {
    fn default() -> Self {
        Self {
            frame_len: 120,
            noise_level: 0.4,
            smoother_k: 5,
        }
    }
}

/// Moving average of length `k` along each row, zero padded by `k / 2`.
fn smooth_rows(plane: &[f64], rows: usize, cols: usize, k: usize) -> Vec<f64> {
    let half = k / 2;
    let scale = 1.0 / k as f64;
    let mut out = vec![0.0; plane.len()];
    for r in 0..rows {
        let row = &plane[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        for (l, d) in dst.iter_mut().enumerate() {
            let lo = l.saturating_sub(half);
            let hi = (l + half).min(cols - 1);
            *d = row[lo..=hi].iter().sum::<f64>() * scale;
        }
    }
    out
}

/// Smoothed complex perturbation, same layout as [`Ufp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

pub fn freq_smoother(u: &Ufp) -> Smoothed {
    Smoothed {
        re: smooth_rows(&u.delta_re, u.bins(), u.frame_len, u.smoother_k),
        im: smooth_rows(&u.delta_im, u.bins(), u.frame_len, u.smoother_k),
    }
}

/// Adjoint of [`freq_smoother`]. The zero-padded box filter is symmetric, so
/// correlation and convolution coincide.
pub fn freq_smoother_adjoint(grad: &Smoothed, u: &Ufp) -> Smoothed {
    Smoothed {
        re: smooth_rows(&grad.re, u.bins(), u.frame_len, u.smoother_k),
        im: smooth_rows(&grad.im, u.bins(), u.frame_len, u.smoother_k),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShiftSpec {
    Fixed(usize),
    Random,
}

/// Segment augmentation used while optimizing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileAugment {
    pub enabled: bool,
    pub mask_ratio: f64,
    pub shift: ShiftSpec,
    pub rng_seed: u64,
}

impl TileAugment {
    /// Full-frame tiling: no shift, no mask.
    pub fn deploy() -> Self {
        Self {
            enabled: false,
            mask_ratio: 0.0,
            shift: ShiftSpec::Fixed(0),
            rng_seed: 0,
        }
    }

    pub fn train(mask_ratio: f64, rng_seed: u64) -> Self {
        Self {
            enabled: true,
            mask_ratio,
            shift: ShiftSpec::Random,
            rng_seed,
        }
    }

    pub fn validate(&self, frame_len: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(invalid(format!("mask ratio must lie in [0, 1], got {}", self.mask_ratio)));
        }
        if let ShiftSpec::Fixed(e) = self.shift {
            if e > frame_len {
                return Err(invalid(format!("shift {e} exceeds frame length {frame_len}")));
            }
        }
        Ok(())
    }
}

/// The shift and segment mask realized by one tiler call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlacement {
    pub shift: usize,
    pub kept: Vec<bool>,
}

impl TilePlacement {
    pub fn deploy(frames: usize, frame_len: usize) -> Self {
        Self {
            shift: 0,
            kept: vec![true; frames / frame_len],
        }
    }

    pub fn draw(aug: &TileAugment, frames: usize, frame_len: usize, rng: &mut rng::Rng) -> Result<Self> {
        aug.validate(frame_len)?;
        if !aug.enabled {
            return Ok(Self::deploy(frames, frame_len));
        }
        let shift = match aug.shift {
            ShiftSpec::Fixed(e) => e,
            ShiftSpec::Random => rng.random_range(0..=frame_len),
        };
        let kept = (0..frames / frame_len)
            .map(|_| rng.random_bool(1.0 - aug.mask_ratio))
            .collect();
        Ok(Self { shift, kept })
    }

    /// Start frames of the segments that actually receive the perturbation.
    /// Segments that would run past the last frame are skipped.
    pub fn active_segments(&self, frames: usize, frame_len: usize) -> impl Iterator<Item = usize> + '_ {
        self.kept.iter().enumerate().filter_map(move |(i, &k)| {
            let start = self.shift + i * frame_len;
            (k && start + frame_len <= frames).then_some(start)
        })
    }

    fn check(&self, frames: usize, frame_len: usize) -> Result<()> {
        if self.kept.len() != frames / frame_len || self.shift > frame_len {
            return Err(Error::ShapeMismatch(format!(
                "placement (shift {}, {} segments) does not match {frames} frames of length {frame_len}",
                self.shift,
                self.kept.len()
            )));
        }
        Ok(())
    }
}

/// Add `noise_level * delta` to the active segments of `spec` in place.
pub fn apply_tiles(spec: &mut Spectrogram, delta: &Smoothed, u: &Ufp, placement: &TilePlacement) -> Result<()> {
    check_compat(spec.params, u)?;
    let frames = spec.frames();
    placement.check(frames, u.frame_len)?;
    let bins = u.bins();
    let level = u.noise_level;
    let starts: Vec<usize> = placement.active_segments(frames, u.frame_len).collect();
    for start in starts {
        for l in 0..u.frame_len {
            let base = (start + l) * bins;
            for b in 0..bins {
                let d = b * u.frame_len + l;
                spec.re[base + b] += level * delta.re[d];
                spec.im[base + b] += level * delta.im[d];
            }
        }
    }
    Ok(())
}

/// Adjoint of [`apply_tiles`] with respect to the smoothed perturbation.
pub fn gather_tiles(grad: &Spectrogram, u: &Ufp, placement: &TilePlacement) -> Result<Smoothed> {
    check_compat(grad.params, u)?;
    let frames = grad.frames();
    placement.check(frames, u.frame_len)?;
    let bins = u.bins();
    let level = u.noise_level;
    let mut out = Smoothed {
        re: vec![0.0; bins * u.frame_len],
        im: vec![0.0; bins * u.frame_len],
    };
    for start in placement.active_segments(frames, u.frame_len) {
        for l in 0..u.frame_len {
            let base = (start + l) * bins;
            for b in 0..bins {
                let d = b * u.frame_len + l;
                out.re[d] += level * grad.re[base + b];
                out.im[d] += level * grad.im[base + b];
            }
        }
    }
    Ok(out)
}

fn check_compat(params: StftParams, u: &Ufp) -> Result<()> {
    if params != u.stft {
        return Err(Error::Incompatible(format!(
            "UFP was built for n_fft={} hop={}, audio analysed with n_fft={} hop={}",
            u.stft.n_fft, u.stft.hop, params.n_fft, params.hop
        )));
    }
    Ok(())
}

/// Output of one tiler call.
#[derive(Debug, Clone)]
pub struct Tiled {
    pub audio: AudioBuffer,
    pub placement: TilePlacement,
}

fn too_short(x: &AudioBuffer, u: &Ufp) -> Error {
    let min = u.min_samples();
    Error::TooShort(format!(
        "{} samples; a frame length of {} needs at least {min} samples ({:.3} s at {} Hz)",
        x.len(),
        u.frame_len,
        min as f64 / x.sample_rate as f64,
        x.sample_rate
    ))
}

/// Analyse `x`, add the tiled perturbation and resynthesize.
///
/// With augmentation disabled every full segment is perturbed and the
/// trailing `frames % frame_len` frames are left untouched. With augmentation
/// the shift and mask are drawn from a generator seeded by `aug.rng_seed`.
pub fn tiler(x: &AudioBuffer, u: &Ufp, aug: &TileAugment) -> Result<Tiled> {
    u.validate()?;
    let spec = analyse(x, u)?;
    let mut rng = rng::rng_from(aug.rng_seed);
    let placement = TilePlacement::draw(aug, spec.frames(), u.frame_len, &mut rng)?;
    let audio = tile_with_placement(x, &spec, u, &freq_smoother(u), &placement)?;
    Ok(Tiled { audio, placement })
}

/// Deployment tiling.
pub fn protect(x: &AudioBuffer, u: &Ufp) -> Result<AudioBuffer> {
    tiler(x, u, &TileAugment::deploy()).map(|t| t.audio)
}

/// Deployment tiling that also accepts inputs shorter than one segment.
/// Such inputs go through analysis and resynthesis with no segment added.
pub fn protect_any_length(x: &AudioBuffer, u: &Ufp) -> Result<AudioBuffer> {
    u.validate()?;
    let spec = dsp::stft(&x.samples, &u.stft)?;
    let placement = TilePlacement::deploy(spec.frames(), u.frame_len);
    tile_with_placement(x, &spec, u, &freq_smoother(u), &placement)
}

/// STFT of `x` after checking it is long enough for one UFP segment.
pub fn analyse(x: &AudioBuffer, u: &Ufp) -> Result<Spectrogram> {
    match u.stft.frames(x.len()) {
        Some(l) if l >= u.frame_len => dsp::stft(&x.samples, &u.stft),
        _ => Err(too_short(x, u)),
    }
}

/// Tiling at a fixed placement, given the precomputed STFT of `x`.
pub fn tile_with_placement(
    x: &AudioBuffer,
    spec: &Spectrogram,
    u: &Ufp,
    smoothed: &Smoothed,
    placement: &TilePlacement,
) -> Result<AudioBuffer> {
    let mut perturbed = spec.clone();
    apply_tiles(&mut perturbed, smoothed, u, placement)?;
    AudioBuffer::new(dsp::resynthesize(&perturbed, &x.samples)?, x.sample_rate)
}

/// Gradient of the tiler output with respect to the smoothed perturbation
/// (before the smoother adjoint), at a fixed placement.
pub fn tiler_adjoint_smoothed(grad: &[f64], frames: usize, u: &Ufp, placement: &TilePlacement) -> Result<Smoothed> {
    let gspec = dsp::resynthesize_adjoint(grad, &u.stft, frames)?;
    gather_tiles(&gspec, u, placement)
}

/// Gradient of `<tiler(x, u), grad>` with respect to `delta_re` and `delta_im`
/// at the placement realized by the paired forward call.
pub fn tiler_adjoint(grad: &[f64], x: &AudioBuffer, u: &Ufp, placement: &TilePlacement) -> Result<Smoothed> {
    if grad.len() != x.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient has {} samples, input has {}",
            grad.len(),
            x.len()
        )));
    }
    let frames = match u.stft.frames(x.len()) {
        Some(l) if l >= u.frame_len => l,
        _ => return Err(too_short(x, u)),
    };
    let g = tiler_adjoint_smoothed(grad, frames, u, placement)?;
    Ok(freq_smoother_adjoint(&g, u))
}
