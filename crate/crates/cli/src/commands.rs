use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use ufp_core::attacks::{AttackKind, Attacks, DEFAULT_ATTACK_MELS};
use ufp_core::audio::{self, AudioBuffer};
use ufp_core::encoder::{SpeakerEncoder, SurrogateEncoder};
use ufp_core::eval::{self, EmbeddingCache, EvalReport};
use ufp_core::optim::{self, TrainReport};
use ufp_core::ufp::{self, Ufp};
use ufp_core::{rng, Error, Result, SAMPLE_RATE};

use crate::config::RunConfig;

fn load(path: &Path) -> Result<AudioBuffer> {
    eval::load_for_scoring(path)
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<AudioBuffer>> {
    paths.par_iter().map(|p| load(p)).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn encoder(cfg: &RunConfig) -> Result<SurrogateEncoder> {
    SurrogateEncoder::new(cfg.encoder_config())
}

/// Threshold from the config, or the EER point of a trial list.
fn resolve_threshold<E: SpeakerEncoder>(
    cfg: &RunConfig,
    fallback_trials: Option<PathBuf>,
    cache: &EmbeddingCache<E>,
) -> Result<Option<(f64, Option<f64>)>> {
    if let Some(t) = cfg.threshold {
        return Ok(Some((t, None)));
    }
    let Some(path) = cfg.trials.clone().or(fallback_trials) else {
        return Ok(None);
    };
    let trials = eval::read_trials(&path)?;
    let point = eval::compute_eer_threshold(&cache.score_trials(&trials)?)?;
    Ok(Some((point.threshold, Some(point.eer))))
}

fn with_sibling_ext(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(ext);
    PathBuf::from(s)
}

pub fn train(corpus: &Path, out: &Path, speaker: Option<usize>, report_path: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    print!("config:\n{}", cfg.echo());
    let mut files = audio::list_wavs(corpus)?;
    if let Some(s) = speaker {
        let manifest = eval::read_manifest(&corpus.join(eval::MANIFEST_FILE))?;
        let keep: std::collections::HashSet<&str> = manifest.iter().filter(|e| e.speaker == s).map(|e| e.file.as_str()).collect();
        files.retain(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| keep.contains(n)));
    }
    if files.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "training needs at least 2 usable files, found {} in {}",
            files.len(),
            corpus.display()
        )));
    }
    let order = rng::shuffled_indices(files.len(), cfg.seed, "train-split");
    let n_train = ((cfg.train_ratio * files.len() as f64).round() as usize).clamp(1, files.len() - 1);
    let train_paths: Vec<PathBuf> = order[..n_train].iter().map(|&i| files[i].clone()).collect();
    let held_paths: Vec<PathBuf> = order[n_train..].iter().map(|&i| files[i].clone()).collect();
    println!("split: {} train, {} held-out", train_paths.len(), held_paths.len());

    let enc = encoder(cfg)?;
    let train_set = load_all(&train_paths)?;
    let held_set = load_all(&held_paths)?;
    let (u, mut report) = optim::optimize_ufp(&train_set, &cfg.train_config(), &enc, cfg.stft, &cfg.ufp)?;

    let cache = EmbeddingCache::new(&enc);
    let default_trials = corpus.join(eval::TRIALS_FILE);
    let threshold = resolve_threshold(cfg, default_trials.is_file().then_some(default_trials), &cache)?;
    if let Some((tau, _)) = threshold {
        report.train_evasion = Some(eval::evasion_rate(&train_set, &u, tau, &enc)?);
        report.heldout_evasion = Some(eval::evasion_rate(&held_set, &u, tau, &enc)?);
    }
    u.save(out)?;
    let report_path = report_path.map(Path::to_path_buf).unwrap_or_else(|| with_sibling_ext(out, ".report.txt"));
    write_text(&report_path, &report.to_text())?;
    write_text(&report_path.with_extension("json"), &report.to_json())?;
    print_train_summary(&report, threshold.map(|t| t.0));
    println!("wrote {}", out.display());
    Ok(())
}

fn print_train_summary(report: &TrainReport, tau: Option<f64>) {
    let last = report.total.len() - 1;
    println!(
        "loss: total {:.6} -> {:.6}, feature {:.6} -> {:.6}, perception {:.3e} -> {:.3e}",
        report.total[0], report.total[last], report.feature[0], report.feature[last], report.perception[0], report.perception[last]
    );
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    println!("threshold: {}", fmt(tau));
    println!("train evasion rate: {}", fmt(report.train_evasion));
    println!("held-out evasion rate: {}", fmt(report.heldout_evasion));
    println!("wall time: {:.2} s", report.wall_time_s);
}

pub fn protect(input: &Path, ufp_path: &Path, out: &Path) -> Result<()> {
    let u = Ufp::load(ufp_path)?;
    let jobs: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        audio::list_wavs(input)?
            .into_iter()
            .map(|p| {
                let q = out.join(p.file_name().expect("listed files have names"));
                (p, q)
            })
            .collect()
    } else {
        vec![(input.to_path_buf(), out.to_path_buf())]
    };
    if jobs.is_empty() {
        return Err(Error::InvalidArgument(format!("no .wav files in {}", input.display())));
    }
    println!("{:<40} {:>10} {:>10}", "file", "seconds", "rtc");
    for (src, dst) in jobs {
        let x = load(&src)?;
        let t0 = Instant::now();
        let y = ufp::protect(&x, &u)?;
        let rtc = t0.elapsed().as_secs_f64() / x.duration_secs();
        let stats = audio::write_wav(&y, &dst)?;
        let name = src.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        println!("{name:<40} {:>10.3} {rtc:>10.5}", x.duration_secs());
        if stats.clipped > 0 {
            eprintln!("warning: {} samples clipped in {}", stats.clipped, dst.display());
        }
    }
    Ok(())
}

fn mean_seg_snr(a: &[AudioBuffer], b: &[AudioBuffer]) -> Option<f64> {
    let vals: Vec<f64> = a
        .iter()
        .zip(b)
        .filter_map(|(x, y)| {
            let n = x.len().min(y.len());
            let x = AudioBuffer::new(x.samples[..n].to_vec(), x.sample_rate).ok()?;
            let y = AudioBuffer::new(y.samples[..n].to_vec(), y.sample_rate).ok()?;
            eval::segmental_snr(&x, &y).ok()
        })
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn require_threshold(t: Option<(f64, Option<f64>)>) -> Result<(f64, Option<f64>)> {
    t.ok_or_else(|| Error::InvalidArgument("a threshold is required: pass --threshold or --trials".into()))
}

pub fn evaluate(originals: &Path, protected: &Path, cloned: Option<&Path>, json: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let enc = encoder(cfg)?;
    let cache = EmbeddingCache::new(&enc);
    let (tau, eer) = require_threshold(resolve_threshold(cfg, None, &cache)?)?;
    let pairs = eval::align_dirs(originals, protected)?;
    let orig_paths: Vec<PathBuf> = pairs.iter().map(|p| p.0.clone()).collect();
    let prot_paths: Vec<PathBuf> = pairs.iter().map(|p| p.1.clone()).collect();
    let orig_emb = cache.embed_paths(&orig_paths)?;
    let prot_emb = cache.embed_paths(&prot_paths)?;

    let mut report = EvalReport {
        eer,
        threshold: tau,
        evasion_rate: Some(eval::reject_rate(&orig_emb, &prot_emb, tau)?),
        seg_snr_db: mean_seg_snr(&load_all(&orig_paths)?, &load_all(&prot_paths)?),
        ..EvalReport::default()
    };
    if let Some(cdir) = cloned {
        let cpairs = eval::align_dirs(originals, cdir)?;
        let cl_paths: Vec<PathBuf> = cpairs.iter().map(|p| p.1.clone()).collect();
        let cl_emb = cache.embed_paths(&cl_paths)?;
        report.spr = Some(eval::reject_rate(&prot_emb, &cl_emb, tau)?);
        report.dpr = Some(eval::reject_rate(&orig_emb, &cl_emb, tau)?);
        report.match_rate = Some(eval::accept_rate(&orig_emb, &cl_emb, tau)?);
    }
    print!("{}", report.to_table());
    if let Some(p) = json {
        write_text(p, &report.to_json())?;
    }
    Ok(())
}

pub fn attack(
    protected: &Path,
    originals: &Path,
    ufp_path: &Path,
    cloned_root: Option<&Path>,
    json: Option<&Path>,
    cfg: &RunConfig,
) -> Result<()> {
    let u = Ufp::load(ufp_path)?;
    let enc = encoder(cfg)?;
    let cache = EmbeddingCache::new(&enc);
    let (tau, _) = require_threshold(resolve_threshold(cfg, None, &cache)?)?;
    let pairs = eval::align_dirs(originals, protected)?;
    let orig = load_all(&pairs.iter().map(|p| p.0.clone()).collect::<Vec<_>>())?;
    let prot = load_all(&pairs.iter().map(|p| p.1.clone()).collect::<Vec<_>>())?;
    let attacks = Attacks::new(u.stft, DEFAULT_ATTACK_MELS)?;

    let mut clones: Vec<(AttackKind, Vec<AudioBuffer>)> = Vec::new();
    if let Some(root) = cloned_root {
        for kind in AttackKind::ALL {
            let dir = root.join(kind.name());
            if dir.is_dir() {
                let cp = eval::align_dirs(originals, &dir)?;
                clones.push((kind, load_all(&cp.iter().map(|p| p.1.clone()).collect::<Vec<_>>())?));
            }
        }
    }
    let lookup = |k: AttackKind| clones.iter().find(|(c, _)| *c == k).map(|(_, v)| v.clone());
    let table = ufp_core::attacks::run_attack_suite(&prot, &orig, Some(&lookup), tau, &enc, &attacks)?;
    print!("{}", table.to_table());
    if let Some(p) = json {
        write_text(p, &table.to_json())?;
    }
    Ok(())
}

pub fn bench(ufp_path: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let u = match ufp_path {
        Some(p) => Ufp::load(p)?,
        None => Ufp::random(
            cfg.stft,
            cfg.ufp.frame_len,
            cfg.ufp.noise_level,
            cfg.ufp.smoother_k,
            rng::derive_seed(cfg.seed, "bench-ufp"),
        )?,
    };
    let points = eval::rtc_benchmark(&cfg.bench_durations, &u, cfg.bench_reps, cfg.seed)?;
    println!("{:>10} {:>12} {:>10}", "seconds", "median_s", "rtc");
    for p in &points {
        println!("{:>10} {:>12.6} {:>10.6}", p.duration_s, p.median_s, p.rtc);
    }
    let report = eval::param_efficiency_report(&u.stft, u.frame_len, cfg.bench_audio_seconds)?;
    print!("{}", report.to_text());
    let mut bytes = Vec::new();
    u.write_to(&mut bytes).map_err(|e| Error::io("<memory>", e))?;
    println!("UFP file size = {} bytes", eval::with_thousands(bytes.len() as u64));
    Ok(())
}

pub fn synth(out: &Path, cfg: &RunConfig) -> Result<()> {
    let entries = eval::generate_synthetic_corpus(out, cfg.speakers, cfg.utts, cfg.duration, cfg.seed)?;
    println!(
        "wrote {} files ({} speakers x {} utterances, {} s at {} Hz) to {}",
        entries.len(),
        cfg.speakers,
        cfg.utts,
        cfg.duration,
        SAMPLE_RATE,
        out.display()
    );
    Ok(())
}
