//! Mono audio buffers, WAV I/O and band-limited resampling.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Mono waveform at a declared sample rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(invalid("sample rate must be positive"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    /// Clip every sample into [-1, 1], returning how many were out of range.
    pub fn clip(&mut self) -> usize {
        let mut clipped = 0;
        for s in &mut self.samples {
            if s.abs() > 1.0 {
                *s = s.clamp(-1.0, 1.0);
                clipped += 1;
            }
        }
        clipped
    }
}

/// Diagnostics gathered while decoding or encoding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClipStats {
    pub clipped: usize,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    read_wav_with_stats(path).map(|(buf, _)| buf)
}

/// Decode a PCM16 or float32 WAV file, mixing channels down to mono.
pub fn read_wav_with_stats(path: impl AsRef<Path>) -> Result<(AudioBuffer, ClipStats)> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format(format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding(format!(
                "{}: {bits}-bit {fmt:?}",
                path.display()
            )))
        }
    };
    if !interleaved.len().is_multiple_of(channels) {
        return Err(Error::Format(format!(
            "{}: sample count not a multiple of the channel count",
            path.display()
        )));
    }
    let samples = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    let mut buf = AudioBuffer::new(samples, spec.sample_rate)?;
    let clipped = buf.clip();
    Ok((buf, ClipStats { clipped }))
}

/// `.wav` files directly inside `dir`, sorted by name.
pub fn list_wavs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_wav = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if is_wav && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Encode as 16-bit PCM mono. Out-of-range samples are clipped and counted.
pub fn write_wav(buf: &AudioBuffer, path: impl AsRef<Path>) -> Result<ClipStats> {
    let path = path.as_ref();
    if buf.is_empty() {
        return Err(invalid("cannot write an empty buffer"));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    let mut clipped = 0;
    for &s in &buf.samples {
        if s.abs() > 1.0 {
            clipped += 1;
        }
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))?;
    Ok(ClipStats { clipped })
}

fn map_hound(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io)
            if io.kind() == std::io::ErrorKind::UnexpectedEof
                || (io.kind() == std::io::ErrorKind::Other
                    && io.to_string().contains("read enough bytes")) =>
        {
            Error::Format(format!("{}: truncated file", path.display()))
        }
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::FormatError(msg) => Error::Format(format!("{}: {msg}", path.display())),
        hound::Error::Unsupported => {
            Error::UnsupportedEncoding(format!("{}: unsupported WAV codec", path.display()))
        }
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Zero crossings of the sinc kernel on each side.
const SINC_ZERO_CROSSINGS: f64 = 32.0;
/// Cutoff relative to the lower Nyquist frequency.
const SINC_ROLLOFF: f64 = 0.94;
const KAISER_BETA: f64 = 8.6;
/// Above this many phases the kernel is evaluated on the fly instead of tabulated.
const MAX_TABLE_PHASES: usize = 4096;

/// Band-limited resampling with a Kaiser-windowed sinc kernel.
///
/// For a rational ratio `up/down` the kernel is tabulated per output phase
/// (polyphase form). Output length is `round(len * target / source)`.
pub fn resample(buf: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if target_rate == 0 {
        return Err(invalid("target sample rate must be positive"));
    }
    if target_rate == buf.sample_rate {
        return Ok(buf.clone());
    }
    let src = buf.sample_rate as u64;
    let tgt = target_rate as u64;
    let g = gcd(src, tgt);
    let up = (tgt / g) as usize;
    let down = (src / g) as usize;
    let n_in = buf.len();
    let n_out = ((n_in as u64 * tgt + src / 2) / src) as usize;

    // Cutoff in cycles per input sample.
    let fc = 0.5 * SINC_ROLLOFF * (up as f64 / down as f64).min(1.0);
    let half = (SINC_ZERO_CROSSINGS / (2.0 * fc)).ceil() as usize;
    let taps = 2 * half;
    let kernel = |tau: f64| -> f64 {
        let r = tau / half as f64;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        2.0 * fc * sinc(2.0 * fc * tau) * bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt())
            / bessel_i0(KAISER_BETA)
    };
    let phase_taps = |p: usize| -> Vec<f64> {
        let frac = p as f64 / up as f64;
        (0..taps)
            .map(|n| kernel(frac + half as f64 - 1.0 - n as f64))
            .collect()
    };
    let table: Option<Vec<Vec<f64>>> =
        (up <= MAX_TABLE_PHASES).then(|| (0..up).map(phase_taps).collect());

    let x = &buf.samples;
    let mut out = Vec::with_capacity(n_out);
    for j in 0..n_out {
        let pos = j as u64 * down as u64;
        let i0 = (pos / up as u64) as i64;
        let p = (pos % up as u64) as usize;
        let owned;
        let h: &[f64] = match &table {
            Some(t) => &t[p],
            None => {
                owned = phase_taps(p);
                &owned
            }
        };
        let start = i0 - half as i64 + 1;
        let mut acc = 0.0;
        for (n, &hn) in h.iter().enumerate() {
            let k = start + n as i64;
            if k >= 0 && (k as usize) < n_in {
                acc += hn * x[k as usize];
            }
        }
        out.push(acc);
    }
    AudioBuffer::new(out, target_rate)
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}
