//! Training objective, augmentation, Adam, the box projection and the
//! full-batch optimization loop.
//!
//! The objective for one utterance `x` with tiler output `x~` is
//!
//! ```text
//! L = -|| E(x) - E(aug(x~)) ||^2 + lambda * ||x - x~||^2 / T
//! ```
//!
//! averaged over the training set. The feature term is negated so that
//! minimizing the objective pushes the protected embedding away.

use std::time::Instant;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::dsp::{self, Spectrogram, StftParams};
use crate::encoder::{Embedding, SpeakerEncoder, SurrogateEncoder};
use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::ufp::{self, Smoothed, TileAugment, TilePlacement, Ufp, UfpConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub mask_ratio: f64,
    pub aug_noise_std: f64,
    /// Maximum circular jitter, in samples.
    pub aug_jitter_max: usize,
    pub seed: u64,
    /// Optional per-bin magnitude caps applied after every step.
    pub mask_thresholds: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            lambda: 100.0,
            learning_rate: 0.05,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            mask_ratio: 0.3,
            aug_noise_std: 0.005,
            aug_jitter_max: StftParams::default().hop,
            seed: 0,
            mask_thresholds: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(invalid("iterations must be at least 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(invalid("lambda must be >= 0"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning_rate must be positive"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(invalid(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(invalid("adam_eps must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(invalid(format!("mask_ratio must lie in [0, 1], got {}", self.mask_ratio)));
        }
        if !(self.aug_noise_std >= 0.0) {
            return Err(invalid("aug_noise_std must be >= 0"));
        }
        Ok(())
    }
}

/// `-||z - z~||^2` and its gradient with respect to `z~`.
pub fn feature_loss(z: &Embedding, z_tilde: &Embedding) -> Result<(f64, Vec<f64>)> {
    if z.dim() != z_tilde.dim() {
        return Err(Error::ShapeMismatch(format!(
            "embedding dims {} and {}",
            z.dim(),
            z_tilde.dim()
        )));
    }
    let diff: Vec<f64> = z.0.iter().zip(&z_tilde.0).map(|(a, b)| a - b).collect();
    let loss = -diff.iter().map(|d| d * d).sum::<f64>();
    let grad = diff.iter().map(|d| 2.0 * d).collect();
    Ok((loss, grad))
}

/// `||x - x~||^2 / T` and its gradient with respect to `x~`. `x~` is compared
/// over the first `T = len(x)` samples, zero padded if shorter.
pub fn perception_loss(x: &[f64], x_tilde: &[f64]) -> (f64, Vec<f64>) {
    let t = x.len() as f64;
    let mut grad = vec![0.0; x_tilde.len()];
    let mut loss = 0.0;
    for (i, &xi) in x.iter().enumerate() {
        let yi = x_tilde.get(i).copied().unwrap_or(0.0);
        let d = yi - xi;
        loss += d * d;
        if i < grad.len() {
            grad[i] = 2.0 * d / t;
        }
    }
    (loss / t, grad)
}

/// Realized additive noise and circular jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalAug {
    pub shift: i64,
    pub noise: Vec<f64>,
}

impl TemporalAug {
    pub fn identity(len: usize) -> Self {
        Self {
            shift: 0,
            noise: vec![0.0; len],
        }
    }

    pub fn draw(len: usize, cfg: &TrainConfig, rng: &mut rng::Rng) -> Self {
        let j = cfg.aug_jitter_max as i64;
        let shift = if j == 0 { 0 } else { rng.random_range(-j..=j) };
        let noise = if cfg.aug_noise_std == 0.0 {
            vec![0.0; len]
        } else {
            (0..len)
                .map(|_| cfg.aug_noise_std * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        Self { shift, noise }
    }

    fn offset(&self, len: usize) -> usize {
        self.shift.rem_euclid(len as i64) as usize
    }

    /// `y[n] = x[(n - shift) mod T] + noise[n]`
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let s = self.offset(n);
        (0..n)
            .map(|i| x[(i + n - s) % n] + self.noise.get(i).copied().unwrap_or(0.0))
            .collect()
    }

    /// Adjoint of the linear part: the inverse circular shift.
    pub fn adjoint(&self, g: &[f64]) -> Vec<f64> {
        let n = g.len();
        let s = self.offset(n);
        (0..n).map(|i| g[(i + s) % n]).collect()
    }
}

/// Draw and apply temporal augmentation to a buffer.
pub fn temporal_augmentation(x: &AudioBuffer, cfg: &TrainConfig, rng: &mut rng::Rng) -> (AudioBuffer, TemporalAug) {
    let aug = TemporalAug::draw(x.len(), cfg, rng);
    let y = AudioBuffer {
        samples: aug.apply(&x.samples),
        sample_rate: x.sample_rate,
    };
    (y, aug)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "Adam state has {} entries, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("Adam step, entry {i} is {}", grads[i])));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Project every `(re, im)` entry of row `b` onto the disk of radius `caps[b]`.
pub fn project_mask_box(u: &Ufp, caps: &[f64]) -> Result<Ufp> {
    if caps.len() != u.bins() {
        return Err(Error::ShapeMismatch(format!(
            "{} caps for {} bins",
            caps.len(),
            u.bins()
        )));
    }
    if let Some(c) = caps.iter().find(|c| !(**c > 0.0)) {
        return Err(invalid(format!("magnitude caps must be positive, got {c}")));
    }
    let mut out = u.clone();
    for (b, &cap) in caps.iter().enumerate() {
        for l in 0..u.frame_len {
            let i = b * u.frame_len + l;
            let (re, im) = (out.delta_re[i], out.delta_im[i]);
            let mag = re.hypot(im);
            if mag > cap {
                let s = cap / mag;
                out.delta_re[i] = re * s;
                out.delta_im[i] = im * s;
            }
        }
    }
    Ok(out)
}

/// A training utterance with its cached spectrogram and clean embedding.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub audio: AudioBuffer,
    pub spec: Spectrogram,
    pub embedding: Embedding,
}

impl TrainingSample {
    pub fn prepare<E: SpeakerEncoder>(audio: AudioBuffer, u: &Ufp, encoder: &E) -> Result<Self> {
        let spec = ufp::analyse(&audio, u)?;
        let embedding = encoder.embed(&audio.samples)?;
        Ok(Self {
            audio,
            spec,
            embedding,
        })
    }
}

/// Augmentation realized for one sample in one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Realization {
    pub placement: TilePlacement,
    pub temporal: TemporalAug,
}

impl Realization {
    pub fn draw(sample: &TrainingSample, u: &Ufp, cfg: &TrainConfig, rng: &mut rng::Rng) -> Result<Self> {
        let aug = TileAugment::train(cfg.mask_ratio, 0);
        let placement = TilePlacement::draw(&aug, sample.spec.frames(), u.frame_len, rng)?;
        let temporal = TemporalAug::draw(sample.audio.len(), cfg, rng);
        Ok(Self { placement, temporal })
    }

    /// Deployment placement with no temporal augmentation.
    pub fn frozen_deploy(sample: &TrainingSample, u: &Ufp) -> Self {
        Self {
            placement: TilePlacement::deploy(sample.spec.frames(), u.frame_len),
            temporal: TemporalAug::identity(sample.audio.len()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub feature: f64,
    pub perception: f64,
}

struct SampleEval {
    terms: LossTerms,
    grad: Smoothed,
}

fn sample_objective<E: SpeakerEncoder>(
    sample: &TrainingSample,
    u: &Ufp,
    smoothed: &Smoothed,
    real: &Realization,
    encoder: &E,
    lambda: f64,
) -> Result<SampleEval> {
    let x = &sample.audio.samples;
    let tiled = ufp::tile_with_placement(&sample.audio, &sample.spec, u, smoothed, &real.placement)?;
    let augmented = real.temporal.apply(&tiled.samples);
    let (z_tilde, tape) = encoder.forward(&augmented)?;
    let (feature, g_z) = feature_loss(&sample.embedding, &z_tilde)?;
    let (perception, g_per) = perception_loss(x, &tiled.samples);

    let g_aug = encoder.backward(&tape, &g_z)?;
    let mut g_tiled = real.temporal.adjoint(&g_aug);
    for (g, p) in g_tiled.iter_mut().zip(&g_per) {
        *g += lambda * p;
    }
    let grad = ufp::tiler_adjoint_smoothed(&g_tiled, sample.spec.frames(), u, &real.placement)?;
    Ok(SampleEval {
        terms: LossTerms {
            total: feature + lambda * perception,
            feature,
            perception,
        },
        grad,
    })
}

/// Fixed-order pairwise sum, independent of thread scheduling.
fn pairwise_sum<T: Clone>(items: &[T], add: &impl Fn(&T, &T) -> T) -> T {
    match items.len() {
        0 => panic!("pairwise_sum of empty slice"),
        1 => items[0].clone(),
        n => {
            let (a, b) = items.split_at(n / 2);
            add(&pairwise_sum(a, add), &pairwise_sum(b, add))
        }
    }
}

/// Mean objective over `samples` and its gradient with respect to
/// `(delta_re, delta_im)`, with augmentation fixed to `realizations`.
pub fn batch_objective<E: SpeakerEncoder>(
    samples: &[TrainingSample],
    realizations: &[Realization],
    u: &Ufp,
    encoder: &E,
    lambda: f64,
) -> Result<(LossTerms, Smoothed)> {
    if samples.is_empty() || samples.len() != realizations.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} samples, {} realizations",
            samples.len(),
            realizations.len()
        )));
    }
    let smoothed = ufp::freq_smoother(u);
    let evals: Vec<SampleEval> = samples
        .par_iter()
        .zip(realizations.par_iter())
        .map(|(s, r)| sample_objective(s, u, &smoothed, r, encoder, lambda))
        .collect::<Result<_>>()?;
    let total = pairwise_sum(&evals.iter().map(|e| (e.terms, &e.grad)).map(|(t, g)| (t, g.clone())).collect::<Vec<_>>(), &|a, b| {
        (
            LossTerms {
                total: a.0.total + b.0.total,
                feature: a.0.feature + b.0.feature,
                perception: a.0.perception + b.0.perception,
            },
            Smoothed {
                re: a.1.re.iter().zip(&b.1.re).map(|(x, y)| x + y).collect(),
                im: a.1.im.iter().zip(&b.1.im).map(|(x, y)| x + y).collect(),
            },
        )
    });
    let n = samples.len() as f64;
    let terms = LossTerms {
        total: total.0.total / n,
        feature: total.0.feature / n,
        perception: total.0.perception / n,
    };
    let mean_grad = Smoothed {
        re: total.1.re.iter().map(|v| v / n).collect(),
        im: total.1.im.iter().map(|v| v / n).collect(),
    };
    Ok((terms, ufp::freq_smoother_adjoint(&mean_grad, u)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub total: Vec<f64>,
    pub feature: Vec<f64>,
    pub perception: Vec<f64>,
    pub train_evasion: Option<f64>,
    pub heldout_evasion: Option<f64>,
    /// Excluded from determinism comparisons.
    pub wall_time_s: f64,
}

impl TrainReport {
    /// Everything except wall time.
    pub fn same_trajectory(&self, other: &TrainReport) -> bool {
        self.total == other.total
            && self.feature == other.feature
            && self.perception == other.perception
            && self.train_evasion == other.train_evasion
            && self.heldout_evasion == other.heldout_evasion
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# iteration total feature perception\n");
        for (i, ((t, f), p)) in self.total.iter().zip(&self.feature).zip(&self.perception).enumerate() {
            out.push_str(&format!("{} {:.10e} {:.10e} {:.10e}\n", i + 1, t, f, p));
        }
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |r| format!("{r:.4}"));
        out.push_str(&format!("# train_evasion {}\n", opt(self.train_evasion)));
        out.push_str(&format!("# heldout_evasion {}\n", opt(self.heldout_evasion)));
        out.push_str(&format!("# wall_time_s {:.3}\n", self.wall_time_s));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Full-batch optimization of a UFP over `train_set`.
///
/// Each iteration draws fresh augmentation for every sample, averages the
/// objective gradient over the set, takes one Adam step on both planes, and
/// applies the box projection when caps are configured.
pub fn optimize_ufp<E: SpeakerEncoder>(
    train_set: &[AudioBuffer],
    cfg: &TrainConfig,
    encoder: &E,
    stft: StftParams,
    shape: &UfpConfig,
) -> Result<(Ufp, TrainReport)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let started = Instant::now();
    let mut u = Ufp::random(
        stft,
        shape.frame_len,
        shape.noise_level,
        shape.smoother_k,
        rng::derive_seed(cfg.seed, "ufp-init"),
    )?;
    if let Some(caps) = &cfg.mask_thresholds {
        u = project_mask_box(&u, caps)?;
    }
    let samples: Vec<TrainingSample> = train_set
        .par_iter()
        .map(|x| TrainingSample::prepare(x.clone(), &u, encoder))
        .collect::<Result<_>>()?;

    let n = u.delta_re.len();
    let mut adam = Adam::new(2 * n, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut params = vec![0.0; 2 * n];
    let mut report = TrainReport {
        total: Vec::with_capacity(cfg.iterations),
        feature: Vec::with_capacity(cfg.iterations),
        perception: Vec::with_capacity(cfg.iterations),
        train_evasion: None,
        heldout_evasion: None,
        wall_time_s: 0.0,
    };

    for iter in 0..cfg.iterations {
        let realizations: Vec<Realization> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut r = rng::rng_for(cfg.seed, &format!("augment:{iter}:{i}"));
                Realization::draw(s, &u, cfg, &mut r)
            })
            .collect::<Result<_>>()?;
        let (terms, grad) = batch_objective(&samples, &realizations, &u, encoder, cfg.lambda)?;
        if !terms.total.is_finite() {
            return Err(Error::Divergence {
                iteration: iter + 1,
                reason: format!("loss is {}", terms.total),
                last_finite: Box::new(u),
            });
        }
        report.total.push(terms.total);
        report.feature.push(terms.feature);
        report.perception.push(terms.perception);

        params[..n].copy_from_slice(&u.delta_re);
        params[n..].copy_from_slice(&u.delta_im);
        let grads: Vec<f64> = grad.re.iter().chain(&grad.im).copied().collect();
        if let Err(e) = adam.step(&mut params, &grads) {
            return Err(Error::Divergence {
                iteration: iter + 1,
                reason: e.to_string(),
                last_finite: Box::new(u),
            });
        }
        u.delta_re.copy_from_slice(&params[..n]);
        u.delta_im.copy_from_slice(&params[n..]);
        if let Some(caps) = &cfg.mask_thresholds {
            u = project_mask_box(&u, caps)?;
        }
    }
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok((u, report))
}

/// Gradient norm of a frame-additive log-mel disruption loss,
/// `-sum_frames ||logmel(x~) - logmel(x)||^2`, for white-noise inputs spanning
/// `m * frame_len` frames for each `m` in `multiples`.
///
/// Every tile contributes its own local gradient to the same parameters, so
/// the norm grows with input length. The training objective pools over
/// frames and therefore does not show this growth.
pub fn gradient_amplification(
    u: &Ufp,
    encoder: &SurrogateEncoder,
    multiples: &[usize],
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    if encoder.config().stft != u.stft {
        return Err(Error::Incompatible("encoder and UFP use different STFT parameters".into()));
    }
    let smoothed = ufp::freq_smoother(u);
    multiples
        .iter()
        .map(|&m| {
            if m == 0 {
                return Err(invalid("length multiple must be at least 1"));
            }
            let frames = m * u.frame_len;
            let len = u.stft.covered_len(frames);
            let mut r = rng::rng_for(seed, &format!("amplification:{m}"));
            let x: Vec<f64> = (0..len).map(|_| 0.1 * r.sample::<f64, _>(StandardNormal)).collect();
            let x = AudioBuffer::new(x, crate::SAMPLE_RATE)?;
            let spec = ufp::analyse(&x, u)?;
            let placement = TilePlacement::deploy(frames, u.frame_len);
            let tiled = ufp::tile_with_placement(&x, &spec, u, &smoothed, &placement)?;
            let (_, clean) = encoder.log_mel(&spec);
            let tiled_spec = dsp::stft(&tiled.samples, &u.stft)?;
            let (mel, log_mel) = encoder.log_mel(&tiled_spec);
            let g_log: Vec<f64> = log_mel.iter().zip(&clean).map(|(a, b)| -2.0 * (a - b)).collect();
            let g_spec = encoder.log_mel_adjoint(&tiled_spec, &mel, &g_log);
            let g_x = dsp::stft_adjoint(&g_spec, &u.stft, len)?;
            let g = ufp::tiler_adjoint_smoothed(&g_x, frames, u, &placement)?;
            let g = ufp::freq_smoother_adjoint(&g, u);
            let norm = g.re.iter().chain(&g.im).map(|v| v * v).sum::<f64>().sqrt();
            Ok((frames, norm))
        })
        .collect()
}
