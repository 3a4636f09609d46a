//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset.

mod common;

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{fixture_config, pair, predict_oracle, random_params};
use ppg_resp::diffusion::{
    ddpm_step, estimate_x0, forward_diffuse, sample, sampler_grid, NoiseSchedule, Sampler, ScheduleConfig,
};
use ppg_resp::dsp::{estimate_rr, SegmentPair};
use ppg_resp::evaluation::{evaluate, score_subject, WindowSpec};
use ppg_resp::signal_io::{split_loso, SyntheticConfig, SyntheticDataset, SyntheticSubject};
use ppg_resp::training::{
    decode_checkpoint, encode_checkpoint, grad_check, load_checkpoint, save_checkpoint, train, ExampleDraw,
    LossContext, SpectralLoss, TrainConfig, TrainOutput,
};
use ppg_resp::{ModelConfig, ModelParams, PreprocessConfig, SegmentStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const FS: f64 = 30.0;
const SEGMENT_LEN: usize = 150;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn default_schedule() -> NoiseSchedule {
    ScheduleConfig::default().build().unwrap()
}

fn gaussian(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Gaussian sample moments against their expectations, in standard errors.
fn moment_z(xs: &[f64], mean: f64, var: f64) -> (f64, f64) {
    let n = xs.len() as f64;
    let (m, v) = mean_var(xs);
    let z_mean = (m - mean).abs() / (var / n).sqrt();
    let z_var = (v - var).abs() / (var * (2.0 / (n - 1.0)).sqrt());
    (z_mean, z_var)
}

fn forward_marginal() -> Outcome {
    let s = default_schedule();
    let y0 = 0.7;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut rows = Vec::new();
    for t in [1, 13, 25, 38, 50] {
        let draws: Vec<f64> = (0..100_000)
            .map(|_| {
                let eps: f64 = StandardNormal.sample(&mut rng);
                forward_diffuse(&[y0], t, &[eps], &s).unwrap()[0]
            })
            .collect();
        let ab = s.alpha_bar(t);
        let (zm, zv) = moment_z(&draws, ab.sqrt() * y0, 1.0 - ab);
        worst = worst.max(zm).max(zv);
        rows.push(format!("t={t} z=({zm:.2},{zv:.2})"));
    }
    outcome(worst < 3.0, format!("max |z| {worst:.2} < 3 [{}]", rows.join(" ")))
}

fn round_trip() -> Outcome {
    let s = default_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let y0: Vec<f64> = gaussian(&mut rng, SEGMENT_LEN);
        for t in 1..=s.steps() {
            let eps = gaussian(&mut rng, SEGMENT_LEN);
            let y_t = forward_diffuse(&y0, t, &eps, &s).unwrap();
            let back = estimate_x0(&y_t, t, &eps, &s).unwrap();
            for (a, b) in back.iter().zip(&y0) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    outcome(worst <= 1e-9, format!("max |error| {worst:.2e} <= 1e-9 over 100 draws x {} steps", s.steps()))
}

fn gradient() -> Outcome {
    let cfg = fixture_config();
    let schedule = NoiseSchedule::linear(4, 1e-4, 0.05).unwrap();
    let spectral = SpectralLoss::new(16);
    let data = [pair("a", 0, 16, 0.0), pair("a", 1, 16, 0.9), pair("b", 0, 16, 2.1)];
    let batch: Vec<&SegmentPair> = data.iter().collect();
    let mut worst: f64 = 0.0;
    let mut rows = Vec::new();
    for (seed, lambda) in [(0, 0.01), (1, 0.01), (2, 1.0)] {
        let params = random_params(&cfg, 100 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws: Vec<ExampleDraw> = batch.iter().map(|_| ExampleDraw::sample(&mut rng, 4, 16)).collect();
        let ctx = LossContext {
            schedule: &schedule,
            lambda_spec: lambda,
            clip_x0: false,
            spectral: &spectral,
        };
        let err = grad_check(&params, &batch, &draws, &ctx, 1e-5).unwrap();
        worst = worst.max(err);
        rows.push(format!("lambda={lambda}: {err:.1e}"));
    }
    let n = random_params(&cfg, 0).num_params();
    outcome(worst < 1e-4, format!("max relative error {worst:.2e} < 1e-4 over {n} params [{}]", rows.join(", ")))
}

fn oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for seed in 0..8u64 {
        let mut cfg = fixture_config();
        cfg.lambda_ppg = 0.25 * seed as f64;
        if seed % 2 == 1 {
            cfg.fine_kernels = vec![1, 3, 5];
            cfg.coarse_kernels = vec![3, 7];
            cfg.coarse_dilation = 3;
        }
        let p = random_params(&cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
        let len = 8 + seed as usize * 3;
        let y = gaussian(&mut rng, len);
        let x = gaussian(&mut rng, len);
        for t in [1, 7, 50] {
            let got = p.predict_noise(&y, t, &x).unwrap();
            let want = predict_oracle(&p, &y, t, &x);
            for (a, b) in got.iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
            cases += 1;
        }
    }
    let p = ModelParams::init(&ModelConfig::default(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (y, x) = (gaussian(&mut rng, SEGMENT_LEN), gaussian(&mut rng, SEGMENT_LEN));
    for (a, b) in p.predict_noise(&y, 25, &x).unwrap().iter().zip(&predict_oracle(&p, &y, 25, &x)) {
        worst = worst.max((a - b).abs());
    }
    outcome(worst <= 1e-12, format!("max |difference| {worst:.2e} <= 1e-12 over {} cases", cases + 1))
}

fn sinusoid(bpm: f64, phase: f64) -> Vec<f64> {
    (0..60 * FS as usize)
        .map(|i| (2.0 * PI * bpm / 60.0 * i as f64 / FS + phase).sin())
        .collect()
}

fn rr_readout() -> Outcome {
    let mut exact = 0;
    let mut misses = Vec::new();
    for bpm in 6..=45 {
        for phase in [0.0, 1.0, 2.5] {
            let got = estimate_rr(&sinusoid(bpm as f64, phase), FS).unwrap();
            if got == bpm as f64 {
                exact += 1;
            } else {
                misses.push(format!("{bpm}->{got}"));
            }
        }
    }
    let mut worst_off: f64 = 0.0;
    let mut off_count = 0;
    for bpm in 6..45 {
        for frac in [0.1, 0.25, 0.4, 0.6, 0.75, 0.9] {
            let f = bpm as f64 + frac;
            let got = estimate_rr(&sinusoid(f, 0.3), FS).unwrap();
            worst_off = worst_off.max((got - f).abs());
            if got != f.round() {
                misses.push(format!("{f}->{got}"));
            }
            off_count += 1;
        }
    }
    outcome(
        misses.is_empty() && worst_off <= 0.5,
        format!(
            "{exact}/120 on-bin exact, {off_count} off-bin max error {worst_off:.2} bpm <= 0.5, misses {misses:?}"
        ),
    )
}

fn sampler_laws() -> Outcome {
    let p = ModelParams::init(&ModelConfig::default(), 3).unwrap();
    let s = default_schedule();
    let cond: Vec<f64> = (0..SEGMENT_LEN).map(|i| 0.5 + 0.4 * (i as f64 * 0.2).sin()).collect();
    let grid = sampler_grid(Sampler::Ddim, 50, 6).unwrap();
    let a = sample(&p, &cond, Sampler::Ddim, &grid, &s, 17).unwrap();
    let b = sample(&p, &cond, Sampler::Ddim, &grid, &s, 17).unwrap();
    let identical = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for t in [2, 10, 30, 50] {
        let draws: Vec<f64> = (0..100_000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                ddpm_step(&[0.4], t, &[-0.2], &s, &[z]).unwrap()[0]
            })
            .collect();
        let (_, v) = mean_var(&draws);
        let var = s.posterior_variance(t);
        let se = var * (2.0 / (draws.len() as f64 - 1.0)).sqrt();
        worst = worst.max((v - var).abs() / se);
    }
    outcome(
        identical && worst < 3.0,
        format!("DDIM bit-identical: {identical}; DDPM variance max |z| {worst:.2} < 3"),
    )
}

const RATES: [f64; 5] = [10.0, 14.0, 17.0, 21.0, 25.0];
const HEART: [f64; 5] = [66.0, 72.0, 78.0, 84.0, 90.0];

fn cohort(seconds: f64) -> SegmentStore {
    let set = SyntheticDataset {
        format_version: 1,
        base: SyntheticConfig {
            duration_s: seconds,
            fs: 125.0,
            am_depth: 0.3,
            fm_depth: 0.3,
            baseline_depth: 0.3,
            noise_std: 0.05,
            ..Default::default()
        },
        subjects: (0..5)
            .map(|i| SyntheticSubject {
                subject_id: format!("syn{}", i + 1),
                seed: i as u64 + 1,
                rr_bpm: RATES[i],
                hr_bpm: Some(HEART[i]),
                duration_s: None,
            })
            .collect(),
    };
    SegmentStore::ingest(&set.recordings().unwrap(), &PreprocessConfig::default()).unwrap()
}

fn held_out(store: &SegmentStore, subject: &str) -> (Vec<SegmentPair>, Vec<SegmentPair>) {
    let (train, mut test) = split_loso(&store.segments, subject).unwrap();
    test.sort_by_key(|s| s.segment_index);
    (train, test)
}

fn end_to_end() -> Outcome {
    let store = cohort(240.0);
    // every error must come from the model: the reference readout is exact
    for (i, s) in store.subjects().iter().enumerate() {
        let truth: Vec<f64> = store.subject_segments(s).unwrap().iter().flat_map(|p| p.resp.clone()).collect();
        let score = evaluate(&truth, &truth, FS, 60.0).unwrap();
        if let Some(w) = score.windows.iter().find(|w| w.rr_true != RATES[i]) {
            return outcome(false, format!("{s}: reference readout {} != {}", w.rr_true, RATES[i]));
        }
    }
    let schedule = default_schedule();
    let mut rows = Vec::new();
    let (mut all_below, mut wins) = (true, 0);
    for subject in store.subjects() {
        let (train_set, test) = held_out(&store, &subject);
        let mut maes = [0.0; 2];
        let mut waves = [0.0; 2];
        for (arm, spectral) in [true, false].into_iter().enumerate() {
            let cfg = TrainConfig {
                spectral_loss: spectral,
                epochs: 50,
                seed: 0,
                ..Default::default()
            };
            let (params, _) = train(&train_set, &cfg, &TrainOutput::default()).unwrap();
            let (score, _, _) =
                score_subject(&params, &schedule, Sampler::Ddim, 50, &test, FS, WindowSpec::default(), 0).unwrap();
            maes[arm] = score.score.rr_mae;
            waves[arm] = score.score.waveform_mae;
        }
        all_below &= maes.iter().all(|m| *m < 2.0);
        if maes[0] < maes[1] {
            wins += 1;
        }
        rows.push(format!(
            "{subject}: on {:.2} / off {:.2} bpm (waveform {:.3} / {:.3})",
            maes[0], maes[1], waves[0], waves[1]
        ));
    }
    outcome(
        all_below && wins >= 4,
        format!(
            "all folds < 2.0 bpm: {all_below}; spectral-on strictly better on {wins}/5 folds (need 4) [{}]",
            rows.join("; ")
        ),
    )
}

fn ablation() -> Outcome {
    let store = cohort(120.0);
    let (train_set, test) = held_out(&store, "syn3");
    let schedule = default_schedule();
    let base = TrainConfig {
        epochs: 1,
        ..Default::default()
    };
    let all_three = TrainConfig {
        kernel_override: Some(vec![3; 6]),
        ..base.clone()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    let mut notes = Vec::new();
    for (name, cfg) in [("default", &base), ("all-3", &all_three)] {
        let (params, _) = train(&train_set, cfg, &TrainOutput::default()).unwrap();
        let path = dir.path().join(format!("{name}.rdf"));
        save_checkpoint(&params, cfg, &path).unwrap();
        let raw = std::fs::read(&path).unwrap();
        let (loaded, loaded_cfg) = decode_checkpoint(&raw).unwrap();
        let kernels: Vec<usize> = loaded.fine_ppg.branches.iter().map(|b| b.kernel).collect();
        let y_kernels: Vec<usize> = loaded.fine_y.branches.iter().map(|b| b.kernel).collect();
        if kernels != loaded_cfg.resolved_model().fine_kernels || kernels != y_kernels {
            return outcome(false, format!("{name}: kernels {kernels:?} disagree with config"));
        }
        match score_subject(&loaded, &schedule, Sampler::Ddim, 6, &test, FS, WindowSpec::default(), 0) {
            Ok((score, _, _)) => notes.push(format!("{name} {kernels:?} RR MAE {:.2}", score.score.rr_mae)),
            Err(e) => return outcome(false, format!("{name}: eval failed: {e}")),
        }
        bytes.push(raw);
    }
    let differ = bytes[0] != bytes[1];
    outcome(differ, format!("checkpoints differ: {differ}; {}", notes.join(", ")))
}

fn checkpoint_round_trip() -> Outcome {
    let store = cohort(60.0);
    let (train_set, test) = held_out(&store, "syn2");
    let cfg = TrainConfig {
        epochs: 1,
        ..Default::default()
    };
    let (params, _) = train(&train_set, &cfg, &TrainOutput::default()).unwrap();
    let schedule = default_schedule();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.rdf");
    let mut identical = true;
    for (sampler, nfe) in [(Sampler::Ddim, 50), (Sampler::Ddim, 6), (Sampler::Ddpm, 50)] {
        let grid = sampler_grid(sampler, 50, nfe).unwrap();
        let before = sample(&params, &test[0].ppg, sampler, &grid, &schedule, 8).unwrap();
        save_checkpoint(&params, &cfg, &path).unwrap();
        let (loaded, loaded_cfg) = load_checkpoint(&path).unwrap();
        let after = sample(&loaded, &test[0].ppg, sampler, &grid, &schedule, 8).unwrap();
        identical &= loaded_cfg == cfg && before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    let stable = encode_checkpoint(&load_checkpoint(&path).unwrap().0, &cfg) == std::fs::read(&path).unwrap();
    outcome(
        identical && stable,
        format!("samples bit-identical after reload: {identical}; re-encoding stable: {stable}"),
    )
}

fn main() -> ExitCode {
    type Check = fn() -> Outcome;
    let criteria: [(u32, &str, Check, Option<Duration>); 9] = [
        (1, "forward marginal", forward_marginal, Some(Duration::from_secs(30))),
        (2, "round trip", round_trip, Some(Duration::from_secs(5))),
        (3, "gradient check", gradient, Some(Duration::from_secs(60))),
        (4, "forward oracle", oracle, None),
        (5, "RR readout", rr_readout, Some(Duration::from_secs(5))),
        (6, "sampler determinism and variance", sampler_laws, None),
        (7, "end-to-end synthetic learning", end_to_end, Some(Duration::from_secs(30 * 60))),
        (8, "kernel ablation plumbing", ablation, None),
        (9, "checkpoint round trip", checkpoint_round_trip, None),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check, budget) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let started = Instant::now();
        let mut result = check();
        let elapsed = started.elapsed();
        if let Some(limit) = budget {
            if elapsed > limit {
                result.pass = false;
                result.detail += &format!("; over the {}s budget", limit.as_secs());
            }
        }
        let tag = if result.pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {id} ({name}): {} [{:.1}s]", result.detail, elapsed.as_secs_f64());
        if !result.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
