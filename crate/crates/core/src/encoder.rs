//! Surrogate speaker encoder and cosine scoring.
//!
//! The surrogate maps audio to a unit-norm embedding through
//! power spectrogram -> mel energies -> log -> per-band temporal mean and
//! standard deviation -> fixed orthonormal projection -> l2 normalization.
//! Every stage has a closed-form reverse pass, so the encoder can sit inside
//! the training objective.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, Spectrogram, StftParams};
use crate::error::{invalid, Error, Result};
use crate::rng;

/// Offset inside the log of mel energies.
pub const LOG_OFFSET: f64 = 1e-6;
/// Added to the variance before the square root in std pooling.
pub const STD_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `a . b / (|a| |b|)`, clamped into [-1, 1] against rounding.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "embedding dims {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Undefined("cosine similarity of a zero vector".into()));
    }
    if a.0 == b.0 {
        return Ok(1.0);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Contract between the optimizer/evaluator and a differentiable encoder.
pub trait SpeakerEncoder: Send + Sync {
    /// Intermediate values kept from a forward pass for the reverse pass.
    type Tape: Send;

    fn dim(&self) -> usize;

    fn forward(&self, x: &[f64]) -> Result<(Embedding, Self::Tape)>;

    /// Vector-Jacobian product: gradient over input samples given an upstream
    /// gradient over the embedding.
    fn backward(&self, tape: &Self::Tape, upstream: &[f64]) -> Result<Vec<f64>>;

    /// Stable identifier of the encoder configuration, used as a cache key.
    fn fingerprint(&self) -> u64;

    fn embed(&self, x: &[f64]) -> Result<Embedding> {
        self.forward(x).map(|(z, _)| z)
    }

    fn embed_adjoint(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let (_, tape) = self.forward(x)?;
        self.backward(&tape, upstream)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_mels: usize,
    pub dim: usize,
    pub projection_seed: u64,
    pub stft: StftParams,
    pub sample_rate: u32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            dim: 64,
            projection_seed: 0x5eed,
            stft: StftParams::default(),
            sample_rate: crate::SAMPLE_RATE,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.n_mels < 2 {
            return Err(invalid("encoder n_mels must be at least 2"));
        }
        if self.dim == 0 || self.dim > 2 * self.n_mels {
            return Err(invalid(format!(
                "embedding dim {} must lie in [1, 2 * n_mels = {}]",
                self.dim,
                2 * self.n_mels
            )));
        }
        Ok(())
    }
}

/// Mel filter stored as its nonzero bin range.
#[derive(Debug, Clone)]
struct Band {
    start: usize,
    weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SurrogateEncoder {
    cfg: EncoderConfig,
    bands: Vec<Band>,
    /// `dim x (2 * n_mels)`, orthonormal rows.
    projection: Vec<f64>,
    fingerprint: u64,
}

/// Values retained from [`SurrogateEncoder::forward`].
#[derive(Debug, Clone)]
pub struct SurrogateTape {
    len: usize,
    spec: Spectrogram,
    /// `frames x n_mels`
    mel: Vec<f64>,
    log_mel: Vec<f64>,
    mean: Vec<f64>,
    std: Vec<f64>,
    projected: Vec<f64>,
}

impl SurrogateEncoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let fb = dsp::mel_filterbank(&cfg.stft, cfg.n_mels, cfg.sample_rate)?;
        let bins = cfg.stft.bins();
        let bands = fb
            .chunks_exact(bins)
            .map(|row| {
                let start = row.iter().position(|v| *v != 0.0).unwrap_or(0);
                let end = row.iter().rposition(|v| *v != 0.0).map_or(start, |e| e + 1);
                Band {
                    start,
                    weights: row[start..end].to_vec(),
                }
            })
            .collect();
        let projection = orthonormal_rows(cfg.dim, 2 * cfg.n_mels, cfg.projection_seed);
        let fingerprint = rng::derive_seed(
            cfg.projection_seed,
            &format!(
                "surrogate:{}:{}:{}:{}:{}",
                cfg.n_mels, cfg.dim, cfg.stft.n_fft, cfg.stft.hop, cfg.sample_rate
            ),
        );
        Ok(Self {
            cfg,
            bands,
            projection,
            fingerprint,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Pooled `[mean; std]` features before projection.
    pub fn pooled_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (_, tape) = self.forward(x)?;
        Ok(tape.mean.iter().chain(&tape.std).copied().collect())
    }

    /// Log-mel frames, `frames x n_mels`.
    pub fn log_mel(&self, spec: &Spectrogram) -> (Vec<f64>, Vec<f64>) {
        let n_mels = self.cfg.n_mels;
        let bins = spec.bins();
        let mut mel = vec![0.0; spec.frames() * n_mels];
        for m in 0..spec.frames() {
            let base = m * bins;
            for (j, band) in self.bands.iter().enumerate() {
                let mut e = 0.0;
                for (o, w) in band.weights.iter().enumerate() {
                    let i = base + band.start + o;
                    e += w * (spec.re[i] * spec.re[i] + spec.im[i] * spec.im[i]);
                }
                mel[m * n_mels + j] = e;
            }
        }
        let log_mel = mel.iter().map(|e| (e + LOG_OFFSET).ln()).collect();
        (mel, log_mel)
    }

    /// Reverse pass from a gradient over log-mel frames to the spectrogram.
    pub fn log_mel_adjoint(&self, spec: &Spectrogram, mel: &[f64], grad_log_mel: &[f64]) -> Spectrogram {
        let n_mels = self.cfg.n_mels;
        let bins = spec.bins();
        let mut out = Spectrogram::zeros(spec.params, spec.frames());
        for m in 0..spec.frames() {
            let base = m * bins;
            for (j, band) in self.bands.iter().enumerate() {
                let k = m * n_mels + j;
                let gm = grad_log_mel[k] / (mel[k] + LOG_OFFSET);
                if gm == 0.0 {
                    continue;
                }
                for (o, w) in band.weights.iter().enumerate() {
                    let i = base + band.start + o;
                    let gp = gm * w;
                    out.re[i] += 2.0 * spec.re[i] * gp;
                    out.im[i] += 2.0 * spec.im[i] * gp;
                }
            }
        }
        out
    }
}

fn orthonormal_rows(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::rng_for(seed, "encoder-projection");
    let mut m: Vec<f64> = (0..rows * cols).map(|_| r.sample(StandardNormal)).collect();
    for i in 0..rows {
        for j in 0..i {
            let dot: f64 = (0..cols).map(|c| m[i * cols + c] * m[j * cols + c]).sum();
            for c in 0..cols {
                m[i * cols + c] -= dot * m[j * cols + c];
            }
        }
        let norm: f64 = m[i * cols..(i + 1) * cols].iter().map(|v| v * v).sum::<f64>().sqrt();
        m[i * cols..(i + 1) * cols].iter_mut().for_each(|v| *v /= norm);
    }
    m
}

impl SpeakerEncoder for SurrogateEncoder {
    type Tape = SurrogateTape;

    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn forward(&self, x: &[f64]) -> Result<(Embedding, SurrogateTape)> {
        let spec = dsp::stft(x, &self.cfg.stft)?;
        let (mel, log_mel) = self.log_mel(&spec);
        let n_mels = self.cfg.n_mels;
        let frames = spec.frames() as f64;
        let mut mean = vec![0.0; n_mels];
        for row in log_mel.chunks_exact(n_mels) {
            for (acc, v) in mean.iter_mut().zip(row) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= frames);
        let mut var = vec![0.0; n_mels];
        for row in log_mel.chunks_exact(n_mels) {
            for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / frames + STD_EPS).sqrt()).collect();

        let feat_dim = 2 * n_mels;
        let projected: Vec<f64> = self
            .projection
            .chunks_exact(feat_dim)
            .map(|row| {
                row[..n_mels].iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>()
                    + row[n_mels..].iter().zip(&std).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let norm = projected.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Undefined("embedding has zero or non-finite norm".into()));
        }
        let z = Embedding(projected.iter().map(|v| v / norm).collect());
        Ok((
            z,
            SurrogateTape {
                len: x.len(),
                spec,
                mel,
                log_mel,
                mean,
                std,
                projected,
            },
        ))
    }

    fn backward(&self, tape: &SurrogateTape, upstream: &[f64]) -> Result<Vec<f64>> {
        let dim = self.cfg.dim;
        if upstream.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient has {} entries, embedding has {dim}",
                upstream.len()
            )));
        }
        let n_mels = self.cfg.n_mels;
        let feat_dim = 2 * n_mels;

        // z = y / |y|  =>  dy = (g - z (z . g)) / |y|
        let norm = tape.projected.iter().map(|v| v * v).sum::<f64>().sqrt();
        let z: Vec<f64> = tape.projected.iter().map(|v| v / norm).collect();
        let zg: f64 = z.iter().zip(upstream).map(|(a, b)| a * b).sum();
        let gy: Vec<f64> = upstream.iter().zip(&z).map(|(g, zi)| (g - zi * zg) / norm).collect();

        let mut gf = vec![0.0; feat_dim];
        for (row, g) in self.projection.chunks_exact(feat_dim).zip(&gy) {
            for (acc, w) in gf.iter_mut().zip(row) {
                *acc += w * g;
            }
        }
        let (g_mean, g_std) = gf.split_at(n_mels);

        let frames = tape.spec.frames();
        let nf = frames as f64;
        let mut g_log = vec![0.0; frames * n_mels];
        for m in 0..frames {
            for j in 0..n_mels {
                let k = m * n_mels + j;
                g_log[k] = g_mean[j] / nf + g_std[j] * (tape.log_mel[k] - tape.mean[j]) / (nf * tape.std[j]);
            }
        }
        let g_spec = self.log_mel_adjoint(&tape.spec, &tape.mel, &g_log);
        dsp::stft_adjoint(&g_spec, &self.cfg.stft, tape.len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn toy_cfg() -> EncoderConfig {
        EncoderConfig {
            n_mels: 12,
            dim: 16,
            stft: StftParams::new(256, 64).unwrap(),
            ..EncoderConfig::default()
        }
    }

    fn voiced(n: usize, f0: f64, seed: u64) -> Vec<f64> {
        let mut r = rng::rng_from(seed);
        (0..n)
            .map(|i| {
                let t = i as f64 / 16000.0;
                (1..8).map(|h| (2.0 * PI * f0 * h as f64 * t).sin() / h as f64).sum::<f64>() * 0.1
                    + 0.01 * r.sample::<f64, _>(StandardNormal)
            })
            .collect()
    }

    #[test]
    fn embedding_is_unit_and_deterministic() {
        let enc = SurrogateEncoder::new(EncoderConfig::default()).unwrap();
        let x = voiced(16000, 140.0, 1);
        let a = enc.embed(&x).unwrap();
        let b = enc.embed(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 64);
        assert!((a.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn projection_rows_orthonormal() {
        let m = orthonormal_rows(10, 24, 3);
        for i in 0..10 {
            for j in 0..10 {
                let d: f64 = (0..24).map(|c| m[i * 24 + c] * m[j * 24 + c]).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_edge_cases() {
        let a = Embedding(vec![1.0, 2.0, -0.5]);
        let neg = Embedding(a.0.iter().map(|v| -v).collect());
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        let e1 = Embedding(vec![1.0, 0.0]);
        let e2 = Embedding(vec![0.0, 3.0]);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&e1, &Embedding(vec![0.0, 0.0])),
            Err(Error::Undefined(_))
        ));
        let scaled = Embedding(a.0.iter().map(|v| 7.5 * v).collect());
        let b = Embedding(vec![0.3, -1.0, 2.0]);
        assert!((cosine_similarity(&scaled, &b).unwrap() - cosine_similarity(&a, &b).unwrap()).abs() < 1e-15);
        assert_eq!(cosine_similarity(&a, &b).unwrap(), cosine_similarity(&b, &a).unwrap());
    }

    #[test]
    fn invalid_config() {
        let cfg = EncoderConfig { dim: 100, ..EncoderConfig::default() };
        assert!(SurrogateEncoder::new(cfg).is_err());
    }

    fn fd_check(x: &[f64], enc: &SurrogateEncoder, seed: u64) {
        let mut r = rng::rng_from(seed);
        let c: Vec<f64> = (0..enc.dim()).map(|_| r.sample(StandardNormal)).collect();
        let f = |v: &[f64]| -> f64 { enc.embed(v).unwrap().0.iter().zip(&c).map(|(a, b)| a * b).sum() };
        let grad = enc.embed_adjoint(x, &c).unwrap();
        for _ in 0..20 {
            let i = r.random_range(0..x.len());
            let h = 1e-5;
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[i] += h;
            dn[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            let scale = fd.abs().max(grad[i].abs());
            assert!(
                (fd - grad[i]).abs() <= 1e-4 * scale + 1e-7,
                "sample {i}: fd {fd} analytic {}",
                grad[i]
            );
        }
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let enc = SurrogateEncoder::new(toy_cfg()).unwrap();
        fd_check(&voiced(4000, 180.0, 2), &enc, 5);
    }

    #[test]
    fn adjoint_finite_at_constant_signal() {
        // Constant input: every log-mel band is constant over time, so the
        // variance vanishes and only the eps keeps the std path differentiable.
        let enc = SurrogateEncoder::new(toy_cfg()).unwrap();
        let x = vec![0.25; 3000];
        let g = enc.embed_adjoint(&x, &vec![1.0; enc.dim()]).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
        fd_check(&x, &enc, 8);
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let enc = SurrogateEncoder::new(toy_cfg()).unwrap();
        let x = voiced(3000, 150.0, 3);
        assert!(enc.embed_adjoint(&x, &vec![0.0; enc.dim()]).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn radial_upstream_is_annihilated() {
        // The normalization Jacobian (I - z z^T) / |y| kills any upstream
        // gradient parallel to z, so a loss depending only on |z| has no pull.
        let enc = SurrogateEncoder::new(toy_cfg()).unwrap();
        let x = voiced(3000, 200.0, 4);
        let (z, tape) = enc.forward(&x).unwrap();
        let g = enc.backward(&tape, z.as_slice()).unwrap();
        let generic = enc.backward(&tape, &vec![1.0; enc.dim()]).unwrap();
        let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let smax = generic.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(gmax < 1e-9 * smax, "{gmax} vs {smax}");
    }
}
