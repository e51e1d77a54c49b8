//! Run configuration: defaults, `key = value` files with `[section]`
//! headers, and `--set` overrides, merged in that order.

use std::path::{Path, PathBuf};

use ufp_core::dsp::StftParams;
use ufp_core::encoder::EncoderConfig;
use ufp_core::optim::TrainConfig;
use ufp_core::ufp::UfpConfig;
use ufp_core::{Error, Result};

/// Every settable key with a one-line description, in echo order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed; every random draw derives from it"),
    ("train.iterations", "optimization iterations"),
    ("train.lambda", "weight of the perception loss"),
    ("train.learning_rate", "Adam step size"),
    ("train.adam_beta1", "Adam first-moment decay"),
    ("train.adam_beta2", "Adam second-moment decay"),
    ("train.adam_eps", "Adam denominator epsilon"),
    ("train.mask_ratio", "probability of dropping a tile during training"),
    ("train.aug_noise_std", "std of additive noise augmentation"),
    ("train.aug_jitter_max", "maximum circular jitter in samples"),
    ("train.mask_thresholds", "per-bin magnitude caps: none, one value, or B comma-separated values"),
    ("train.train_ratio", "fraction of the corpus used for training"),
    ("ufp.noise_level", "perturbation strength"),
    ("ufp.frame_len", "perturbation length in frames"),
    ("ufp.smoother_k", "smoothing window width, odd"),
    ("stft.n_fft", "FFT size"),
    ("stft.hop", "hop size in samples"),
    ("encoder.n_mels", "mel bands of the surrogate encoder"),
    ("encoder.dim", "embedding dimension"),
    ("encoder.projection_seed", "seed of the fixed encoder projection"),
    ("eval.threshold", "verification threshold; none to derive it from a trial list"),
    ("eval.trials", "trial list used to derive the threshold"),
    ("synth.speakers", "synthetic speakers"),
    ("synth.utts", "utterances per synthetic speaker"),
    ("synth.duration", "seconds per synthetic utterance"),
    ("bench.durations", "comma-separated benchmark durations in seconds"),
    ("bench.reps", "timing repetitions per duration (at least 5)"),
    ("bench.audio_seconds", "audio length for the parameter-count comparison"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub train: TrainConfig,
    pub train_ratio: f64,
    pub ufp: UfpConfig,
    pub stft: StftParams,
    pub n_mels: usize,
    pub dim: usize,
    pub projection_seed: u64,
    pub threshold: Option<f64>,
    pub trials: Option<PathBuf>,
    pub speakers: usize,
    pub utts: usize,
    pub duration: f64,
    pub bench_durations: Vec<f64>,
    pub bench_reps: usize,
    pub bench_audio_seconds: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        Self {
            seed: 0,
            train: TrainConfig::default(),
            train_ratio: 0.7,
            ufp: UfpConfig::default(),
            stft: StftParams::default(),
            n_mels: enc.n_mels,
            dim: enc.dim,
            projection_seed: enc.projection_seed,
            threshold: None,
            trials: None,
            speakers: 4,
            utts: 30,
            duration: 3.0,
            bench_durations: vec![1.0, 5.0, 10.0, 30.0, 60.0, 100.0],
            bench_reps: 5,
            bench_audio_seconds: 64.0,
        }
    }
}

fn bad(key: &str, value: &str, why: &str) -> Error {
    Error::InvalidArgument(format!("{key}: {why} (got {value:?})"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, "not a valid number"))
}

fn list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn is_none(value: &str) -> bool {
    matches!(value, "none" | "")
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "train.iterations" => self.train.iterations = num(key, v)?,
            "train.lambda" => self.train.lambda = num(key, v)?,
            "train.learning_rate" => self.train.learning_rate = num(key, v)?,
            "train.adam_beta1" => self.train.adam_beta1 = num(key, v)?,
            "train.adam_beta2" => self.train.adam_beta2 = num(key, v)?,
            "train.adam_eps" => self.train.adam_eps = num(key, v)?,
            "train.mask_ratio" => self.train.mask_ratio = num(key, v)?,
            "train.aug_noise_std" => self.train.aug_noise_std = num(key, v)?,
            "train.aug_jitter_max" => self.train.aug_jitter_max = num(key, v)?,
            "train.mask_thresholds" => {
                self.train.mask_thresholds = if is_none(v) { None } else { Some(list(key, v)?) }
            }
            "train.train_ratio" => self.train_ratio = num(key, v)?,
            "ufp.noise_level" => self.ufp.noise_level = num(key, v)?,
            "ufp.frame_len" => self.ufp.frame_len = num(key, v)?,
            "ufp.smoother_k" => self.ufp.smoother_k = num(key, v)?,
            "stft.n_fft" => self.stft.n_fft = num(key, v)?,
            "stft.hop" => self.stft.hop = num(key, v)?,
            "encoder.n_mels" => self.n_mels = num(key, v)?,
            "encoder.dim" => self.dim = num(key, v)?,
            "encoder.projection_seed" => self.projection_seed = num(key, v)?,
            "eval.threshold" => self.threshold = if is_none(v) { None } else { Some(num(key, v)?) },
            "eval.trials" => self.trials = if is_none(v) { None } else { Some(PathBuf::from(v)) },
            "synth.speakers" => self.speakers = num(key, v)?,
            "synth.utts" => self.utts = num(key, v)?,
            "synth.duration" => self.duration = num(key, v)?,
            "bench.durations" => self.bench_durations = list(key, v)?,
            "bench.reps" => self.bench_reps = num(key, v)?,
            "bench.audio_seconds" => self.bench_audio_seconds = num(key, v)?,
            _ => return Err(Error::InvalidArgument(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".to_string());
        match key {
            "seed" => self.seed.to_string(),
            "train.iterations" => self.train.iterations.to_string(),
            "train.lambda" => self.train.lambda.to_string(),
            "train.learning_rate" => self.train.learning_rate.to_string(),
            "train.adam_beta1" => self.train.adam_beta1.to_string(),
            "train.adam_beta2" => self.train.adam_beta2.to_string(),
            "train.adam_eps" => self.train.adam_eps.to_string(),
            "train.mask_ratio" => self.train.mask_ratio.to_string(),
            "train.aug_noise_std" => self.train.aug_noise_std.to_string(),
            "train.aug_jitter_max" => self.train.aug_jitter_max.to_string(),
            "train.mask_thresholds" => opt(self.train.mask_thresholds.as_deref().map(fmt_list)),
            "train.train_ratio" => self.train_ratio.to_string(),
            "ufp.noise_level" => self.ufp.noise_level.to_string(),
            "ufp.frame_len" => self.ufp.frame_len.to_string(),
            "ufp.smoother_k" => self.ufp.smoother_k.to_string(),
            "stft.n_fft" => self.stft.n_fft.to_string(),
            "stft.hop" => self.stft.hop.to_string(),
            "encoder.n_mels" => self.n_mels.to_string(),
            "encoder.dim" => self.dim.to_string(),
            "encoder.projection_seed" => self.projection_seed.to_string(),
            "eval.threshold" => opt(self.threshold.map(|t| t.to_string())),
            "eval.trials" => opt(self.trials.as_ref().map(|p| p.display().to_string())),
            "synth.speakers" => self.speakers.to_string(),
            "synth.utts" => self.utts.to_string(),
            "synth.duration" => self.duration.to_string(),
            "bench.durations" => fmt_list(&self.bench_durations),
            "bench.reps" => self.bench_reps.to_string(),
            "bench.audio_seconds" => self.bench_audio_seconds.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Apply a config file. Bare keys inside a `[section]` are prefixed
    /// with the section name.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { line: i + 1, message };
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated section header {line:?}")))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, found {line:?}")))?;
            let key = key.trim();
            let full = if section.is_empty() || key.contains('.') {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            self.set(&full, value).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.merge_text(&text)
    }

    /// Apply `key=value` overrides.
    pub fn merge_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("--set expects key=value, got {o:?}")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Reject invalid combinations, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        let named = |key: &str, e: Error| Error::InvalidArgument(format!("{key}: {e}"));
        if self.stft.n_fft < 4 || !self.stft.n_fft.is_multiple_of(2) {
            return Err(bad("stft.n_fft", &self.get("stft.n_fft"), "must be even and at least 4"));
        }
        if self.stft.hop == 0 || !self.stft.n_fft.is_multiple_of(self.stft.hop) {
            return Err(bad("stft.hop", &self.get("stft.hop"), "must be positive and divide stft.n_fft"));
        }
        if self.ufp.frame_len == 0 {
            return Err(bad("ufp.frame_len", "0", "must be at least 1"));
        }
        if self.ufp.smoother_k == 0 || self.ufp.smoother_k.is_multiple_of(2) {
            return Err(bad("ufp.smoother_k", &self.get("ufp.smoother_k"), "must be odd"));
        }
        if !(self.ufp.noise_level >= 0.0 && self.ufp.noise_level.is_finite()) {
            return Err(bad("ufp.noise_level", &self.get("ufp.noise_level"), "must be finite and >= 0"));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(bad("train.train_ratio", &self.get("train.train_ratio"), "must lie strictly between 0 and 1"));
        }
        let checks: [(&str, bool, &str); 8] = [
            ("train.iterations", self.train.iterations >= 1, "must be at least 1"),
            ("train.lambda", self.train.lambda >= 0.0, "must be >= 0"),
            ("train.learning_rate", self.train.learning_rate > 0.0, "must be positive"),
            ("train.adam_beta1", self.train.adam_beta1 > 0.0 && self.train.adam_beta1 < 1.0, "must lie in (0, 1)"),
            ("train.adam_beta2", self.train.adam_beta2 > 0.0 && self.train.adam_beta2 < 1.0, "must lie in (0, 1)"),
            ("train.adam_eps", self.train.adam_eps > 0.0, "must be positive"),
            ("train.mask_ratio", (0.0..=1.0).contains(&self.train.mask_ratio), "must lie in [0, 1]"),
            ("train.aug_noise_std", self.train.aug_noise_std >= 0.0, "must be >= 0"),
        ];
        for (key, ok, why) in checks {
            if !ok {
                return Err(bad(key, &self.get(key), why));
            }
        }
        if let Some(caps) = &self.train.mask_thresholds {
            if caps.len() != 1 && caps.len() != self.stft.bins() {
                return Err(bad(
                    "train.mask_thresholds",
                    &self.get("train.mask_thresholds"),
                    &format!("needs 1 or {} values", self.stft.bins()),
                ));
            }
            if caps.iter().any(|c| !(*c > 0.0)) {
                return Err(bad("train.mask_thresholds", &self.get("train.mask_thresholds"), "caps must be positive"));
            }
        }
        self.encoder_config().validate().map_err(|e| named("encoder.dim", e))?;
        if self.bench_durations.is_empty() || self.bench_durations.iter().any(|d| !(*d > 0.0)) {
            return Err(bad("bench.durations", &self.get("bench.durations"), "must be positive"));
        }
        if !(self.bench_audio_seconds > 0.0) {
            return Err(bad("bench.audio_seconds", &self.get("bench.audio_seconds"), "must be positive"));
        }
        if self.speakers < 2 {
            return Err(bad("synth.speakers", &self.get("synth.speakers"), "must be at least 2"));
        }
        if self.utts < 2 {
            return Err(bad("synth.utts", &self.get("synth.utts"), "must be at least 2"));
        }
        if !(self.duration > 0.0) {
            return Err(bad("synth.duration", &self.get("synth.duration"), "must be positive"));
        }
        if let Some(t) = self.threshold {
            if !t.is_finite() {
                return Err(bad("eval.threshold", &self.get("eval.threshold"), "must be finite"));
            }
        }
        Ok(())
    }

    /// Training settings with the master seed and caps expanded to all bins.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        if let Some(caps) = &t.mask_thresholds {
            if caps.len() == 1 {
                t.mask_thresholds = Some(vec![caps[0]; self.stft.bins()]);
            }
        }
        t
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            n_mels: self.n_mels,
            dim: self.dim,
            projection_seed: self.projection_seed,
            stft: self.stft,
            sample_rate: ufp_core::SAMPLE_RATE,
        }
    }

    /// Every key as `key = value`, one per line.
    pub fn echo(&self) -> String {
        KEYS.iter().map(|(k, _)| format!("{k} = {}\n", self.get(k))).collect()
    }
}

/// Help text listing every key.
pub fn keys_help() -> String {
    let mut out = String::from("Configuration keys (config file `[section]` + `key = value`, or --set section.key=value):\n");
    for (k, d) in KEYS {
        out.push_str(&format!("  {k:<24} {d} [default: {}]\n", RunConfig::default().get(k)));
    }
    out
}
