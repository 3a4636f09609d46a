use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ppg_resp::diffusion::{sampler_grid, NoiseSchedule};
use ppg_resp::evaluation::{
    benchmark as run_benchmark, evaluate_windows, plot_columns, predict_segments, reconstruct, score_subject,
    BenchmarkEntry, BenchmarkFold, EvalEcho, EvalReport, SubjectScore, WindowSpec,
};
use ppg_resp::signal_io::{load_recording, split_loso, DatasetManifest, SyntheticDataset};
use ppg_resp::training::{load_checkpoint, save_checkpoint, train as run_train, TrainConfig, TrainOutput};
use ppg_resp::{ModelParams, PreprocessConfig, Sampler, SegmentPair, SegmentStore};
use serde::Serialize;

use crate::error::CliError;
use crate::{BenchmarkArgs, EvalArgs, InferArgs, IngestArgs, TrainArgs, TrainOverrides};

pub const CONFIG_ECHO: &str = "config.json";
pub const FINAL_CHECKPOINT: &str = "final.rdf";

/// Exclusive claim on an output directory, released on drop.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
        let path = dir.join(".lock");
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| CliError::io(format!("{}: another run holds this directory ({e})", path.display())))?;
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

#[derive(Serialize)]
struct IngestEcho<'a> {
    manifest: Option<&'a Path>,
    synthetic: Option<&'a Path>,
    store: &'a Path,
    preprocess: PreprocessConfig,
    subjects: Vec<String>,
    segments: usize,
}

pub fn ingest(out: &Path, args: &IngestArgs) -> Result<(), CliError> {
    let recordings = if let Some(m) = &args.manifest {
        let manifest = DatasetManifest::load(m)?;
        manifest
            .entries
            .iter()
            .map(load_recording)
            .collect::<Result<Vec<_>, _>>()?
    } else if let Some(s) = &args.synthetic {
        SyntheticDataset::load(s)?.recordings()?
    } else {
        return Err(CliError::validation("one of --manifest or --synthetic is required"));
    };
    let config = PreprocessConfig::default();
    let store = SegmentStore::ingest(&recordings, &config)?;
    {
        let _lock = DirLock::acquire(&args.store)?;
        store.save(&args.store)?;
    }
    let echo = IngestEcho {
        manifest: args.manifest.as_deref(),
        synthetic: args.synthetic.as_deref(),
        store: &args.store,
        preprocess: config,
        subjects: store.subjects(),
        segments: store.segments.len(),
    };
    write_json(&out.join("ingest").join(CONFIG_ECHO), &echo)?;
    println!(
        "ingested {} segments from {} subjects into {}",
        store.segments.len(),
        echo.subjects.len(),
        args.store.display()
    );
    Ok(())
}

/// Config file first, then flags.
pub fn resolve_train_config(o: &TrainOverrides) -> Result<TrainConfig, CliError> {
    let mut cfg = match &o.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.lambda_spec {
        cfg.lambda_spec = v;
    }
    if o.no_spectral_loss {
        cfg.spectral_loss = false;
    }
    if let Some(k) = &o.kernels {
        cfg.kernel_override = Some(k.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct FoldEcho<'a> {
    held_out: &'a str,
    train_subjects: Vec<String>,
    train_segments: usize,
    store: &'a Path,
}

pub fn train(out: &Path, args: &TrainArgs) -> Result<(), CliError> {
    let cfg = resolve_train_config(&args.overrides)?;
    let store = SegmentStore::load(&args.store)?;
    let subjects = store.subjects();
    let held_out: Vec<String> = if args.subject == "all" {
        subjects.clone()
    } else if subjects.contains(&args.subject) {
        vec![args.subject.clone()]
    } else {
        return Err(CliError::validation(format!("unknown subject '{}'", args.subject)));
    };
    let root = out.join("train");
    let _lock = DirLock::acquire(&root)?;
    write_json(&root.join(CONFIG_ECHO), &cfg)?;
    for subject in &held_out {
        let (train_set, _) = split_loso(&store.segments, subject)?;
        if train_set.is_empty() {
            return Err(CliError::validation(format!(
                "holding out '{subject}' leaves no training data"
            )));
        }
        let dir = root.join(subject);
        let fold = FoldEcho {
            held_out: subject,
            train_subjects: ppg_resp::signal_io::subjects(&train_set),
            train_segments: train_set.len(),
            store: &args.store,
        };
        write_json(&dir.join("fold.json"), &fold)?;
        let started = Instant::now();
        let (params, record) = run_train(&train_set, &cfg, &TrainOutput::in_dir(&dir))?;
        save_checkpoint(&params, &cfg, &dir.join(FINAL_CHECKPOINT))?;
        let last = record.epochs.last();
        println!(
            "fold {subject}: {} epochs on {} segments in {:.1} s, final loss {:.5}",
            record.epochs.len(),
            train_set.len(),
            started.elapsed().as_secs_f64(),
            last.map_or(f64::NAN, |e| e.loss.total)
        );
    }
    Ok(())
}

struct Inference {
    params: ModelParams,
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    sampler: Sampler,
    nfe: usize,
    segments: Vec<SegmentPair>,
    fs: f64,
}

fn prepare(args: &InferArgs) -> Result<Inference, CliError> {
    let (params, cfg) = load_checkpoint(&args.checkpoint)?;
    let schedule = cfg.schedule.build()?;
    let sampler = args.sampler.unwrap_or(cfg.sampler);
    let nfe = args.nfe.unwrap_or(match sampler {
        Sampler::Ddpm => schedule.steps(),
        Sampler::Ddim => cfg.nfe,
    });
    sampler_grid(sampler, schedule.steps(), nfe)?;
    let store = SegmentStore::load(&args.store)?;
    let segments = store.subject_segments(&args.subject)?;
    Ok(Inference {
        params,
        cfg,
        schedule,
        sampler,
        nfe,
        segments,
        fs: store.preprocess.target_fs,
    })
}

fn echo(inf: &Inference, args: &InferArgs, hop_s: Option<f64>) -> EvalEcho {
    EvalEcho {
        sampler: inf.sampler,
        nfe: inf.nfe,
        spectral_loss: inf.cfg.spectral_loss,
        window_s: args.window_s,
        hop_s,
        seed: args.seed,
    }
}

fn sample_csv(segments: &[SegmentPair], preds: &[Vec<f64>]) -> String {
    let mut s = String::from("segment_index,position,value\n");
    for (seg, pred) in segments.iter().zip(preds) {
        for (i, v) in pred.iter().enumerate() {
            s.push_str(&format!("{},{},{:.17e}\n", seg.segment_index, i, v));
        }
    }
    s
}

fn read_sample_csv(path: &Path) -> Result<BTreeMap<usize, Vec<f64>>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let bad = || CliError::validation(format!("{}: line {}: malformed row '{line}'", path.display(), n + 1));
        let mut cells = line.split(',');
        let (Some(seg), Some(pos), Some(val), None) = (cells.next(), cells.next(), cells.next(), cells.next()) else {
            return Err(bad());
        };
        let seg: usize = seg.trim().parse().map_err(|_| bad())?;
        let pos: usize = pos.trim().parse().map_err(|_| bad())?;
        let val: f64 = val.trim().parse().map_err(|_| bad())?;
        let row = out.entry(seg).or_default();
        if pos != row.len() {
            return Err(bad());
        }
        row.push(val);
    }
    Ok(out)
}

pub fn sample(out: &Path, args: &InferArgs) -> Result<(), CliError> {
    let inf = prepare(args)?;
    let dir = out.join("sample");
    let _lock = DirLock::acquire(&dir)?;
    let started = Instant::now();
    let preds = predict_segments(&inf.params, &inf.schedule, inf.sampler, inf.nfe, &inf.segments, args.seed)?;
    let seconds = started.elapsed().as_secs_f64();
    write_file(&dir.join(format!("{}.csv", args.subject)), sample_csv(&inf.segments, &preds))?;
    write_json(&dir.join(CONFIG_ECHO), &echo(&inf, args, None))?;
    let timing = format!(
        "sampled {} segments ({} {} NFE) in {seconds:.2} s\n",
        preds.len(),
        inf.sampler,
        inf.nfe
    );
    write_file(&dir.join("timing.txt"), &timing)?;
    print!("{timing}");
    Ok(())
}

pub fn eval(out: &Path, args: &EvalArgs) -> Result<(), CliError> {
    let inf = prepare(&args.infer)?;
    let windows = WindowSpec {
        window_s: args.infer.window_s,
        hop_s: args.hop_s,
    };
    let dir = out.join("eval").join(&args.infer.subject);
    let _lock = DirLock::acquire(&dir)?;
    let started = Instant::now();
    let score = match &args.predictions {
        None => {
            score_subject(
                &inf.params,
                &inf.schedule,
                inf.sampler,
                inf.nfe,
                &inf.segments,
                inf.fs,
                windows,
                args.infer.seed,
            )?
            .0
        }
        Some(path) => {
            let preds = read_sample_csv(path)?;
            let indices: Vec<usize> = inf.segments.iter().map(|s| s.segment_index).collect();
            let pred_segments = indices
                .iter()
                .map(|i| {
                    preds
                        .get(i)
                        .cloned()
                        .ok_or_else(|| CliError::validation(format!("{}: no segment {i}", path.display())))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let truth: Vec<Vec<f64>> = inf.segments.iter().map(|s| s.resp.clone()).collect();
            let pred = reconstruct(&pred_segments, &indices)?;
            let truth = reconstruct(&truth, &indices)?;
            SubjectScore {
                subject_id: args.infer.subject.clone(),
                score: evaluate_windows(&pred, &truth, inf.fs, windows)?,
            }
        }
    };
    let seconds = started.elapsed().as_secs_f64();
    let report = EvalReport::new(echo(&inf, &args.infer, args.hop_s), vec![score]);
    write_json(&dir.join("report.json"), &report)?;
    let text = report.render();
    write_file(&dir.join("report.txt"), &text)?;
    write_json(&dir.join(CONFIG_ECHO), &report.config)?;
    let timing = format!("evaluated {} in {seconds:.2} s\n", args.infer.subject);
    write_file(&dir.join("timing.txt"), &timing)?;
    print!("{text}{timing}");
    Ok(())
}

pub fn plot(out: &Path, args: &InferArgs) -> Result<(), CliError> {
    let inf = prepare(args)?;
    let dir = out.join("plot");
    let _lock = DirLock::acquire(&dir)?;
    let preds = predict_segments(&inf.params, &inf.schedule, inf.sampler, inf.nfe, &inf.segments, args.seed)?;
    let indices: Vec<usize> = inf.segments.iter().map(|s| s.segment_index).collect();
    let truth: Vec<Vec<f64>> = inf.segments.iter().map(|s| s.resp.clone()).collect();
    let pred = reconstruct(&preds, &indices)?;
    let truth = reconstruct(&truth, &indices)?;
    let name = format!(
        "{}_{}_nfe{}_{}.csv",
        args.subject,
        inf.sampler,
        inf.nfe,
        if inf.cfg.spectral_loss { "spec" } else { "nospec" }
    );
    let path = dir.join(name);
    write_file(&path, plot_columns(&pred, &truth, inf.fs, args.window_s)?)?;
    write_json(&dir.join(CONFIG_ECHO), &echo(&inf, args, None))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn parse_grid(grid: &[String]) -> Result<Vec<(Sampler, usize)>, CliError> {
    grid.iter()
        .map(|g| {
            let (s, n) = g
                .split_once(':')
                .ok_or_else(|| CliError::validation(format!("grid entry '{g}' is not sampler:nfe")))?;
            let sampler: Sampler = s.parse().map_err(|e| CliError::validation(format!("{e}")))?;
            let nfe: usize = n
                .parse()
                .map_err(|_| CliError::validation(format!("grid entry '{g}': bad NFE")))?;
            Ok((sampler, nfe))
        })
        .collect()
}

pub fn benchmark(out: &Path, args: &BenchmarkArgs) -> Result<(), CliError> {
    let grid = parse_grid(&args.grid)?;
    let store = SegmentStore::load(&args.store)?;
    let mut entries = Vec::new();
    for spec in &args.models {
        let (label, dir) = spec
            .split_once('=')
            .ok_or_else(|| CliError::validation(format!("--model '{spec}' is not label=DIR")))?;
        let mut folds = Vec::new();
        for subject in store.subjects() {
            let path = Path::new(dir).join(&subject).join(FINAL_CHECKPOINT);
            if !path.exists() {
                continue;
            }
            let (params, cfg) = load_checkpoint(&path)?;
            folds.push(BenchmarkFold {
                params,
                schedule: cfg.schedule.build()?,
                test: store.subject_segments(&subject)?,
            });
        }
        if folds.is_empty() {
            return Err(CliError::validation(format!("{dir}: no fold checkpoints for this store")));
        }
        entries.push(BenchmarkEntry {
            label: label.to_string(),
            folds,
        });
    }
    let windows = WindowSpec {
        window_s: args.window_s,
        hop_s: None,
    };
    let dir = out.join("benchmark");
    let _lock = DirLock::acquire(&dir)?;
    let table = run_benchmark(&entries, &grid, store.preprocess.target_fs, windows, args.seed)?;
    write_json(&dir.join("benchmark.json"), &table)?;
    let text = table.render();
    write_file(&dir.join("benchmark.txt"), &text)?;
    print!("{text}");
    Ok(())
}
