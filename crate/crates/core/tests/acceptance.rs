//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Desk-scale runs are cached under the cargo target tmpdir, keyed by a
//! hash of the library sources, so a second pass only re-evaluates. The
//! wall-clock time of each training run is stored next to its checkpoint and
//! reported with the run-time budgets.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use common::Check;
use pseudoheal::data::{build_phantom_corpus, Corpus, CorpusSpec, DomainTag, Split};
use pseudoheal::eval::{mask_shift_test, metrics::in_chunks, MetricReport, MASK_SHIFT};
use pseudoheal::experiment::{evaluate_run, run_training, semi_config, train_judges, variant_config, EvalOptions, Judges};
use pseudoheal::image::tensor_to_soft;
use pseudoheal::nets::{forward_g, forward_r, forward_s};
use pseudoheal::train::{ModelBundle, Setting, TrainConfig};
use pseudoheal_autograd::Tensor;
use sha2::{Digest, Sha256};

const SEEDS: [u64; 3] = [0, 1, 2];
const TRAIN_SECONDS: &str = "train_seconds.txt";

// Frozen thresholds.
const CYCLE_HH_MAX: f64 = 0.05;
const H_MIN: f64 = 0.7;
const JUDGE_DICE_MIN: f64 = 0.8;
const ID_MIN: f64 = 0.85;
const DESK_RUN_SECONDS: f64 = 30.0 * 60.0;
const ORDERING_SECONDS: f64 = 2.0 * 3600.0;
const SWEEP_SECONDS: f64 = 3.0 * 3600.0;
const H_SPREAD_MAX: f64 = 0.05;
const MASK_SHIFT_MIN: f64 = 0.8;
const UNPAIRED_DICE_MIN: f64 = 0.6;
const SEEDS_NEEDED: usize = 2;

/// Runs trained for the desk-scale criteria.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Run {
    Paired,
    Unpaired,
    Semi,
    Cyclegan,
    NoCycleHh,
}

impl Run {
    const ALL: [Run; 5] = [Run::Paired, Run::Unpaired, Run::Semi, Run::Cyclegan, Run::NoCycleHh];

    fn name(self) -> &'static str {
        match self {
            Run::Paired => "paired",
            Run::Unpaired => "unpaired",
            Run::Semi => "ratio_0.50",
            Run::Cyclegan => "cyclegan",
            Run::NoCycleHh => "no_cycle_hh",
        }
    }

    fn config(self, seed: u64) -> TrainConfig {
        let base = TrainConfig {
            seed,
            ..TrainConfig::desk()
        };
        match self {
            Run::Paired => base,
            Run::Unpaired => TrainConfig {
                setting: Setting::Unpaired,
                ..base
            },
            Run::Semi => semi_config(&base, 0.5),
            Run::Cyclegan => variant_config(&base, "cyclegan").unwrap(),
            Run::NoCycleHh => variant_config(&base, "no_cycle_hh").unwrap(),
        }
    }
}

struct Trained {
    run: Run,
    seed: u64,
    bundle: ModelBundle,
    report: MetricReport,
    seconds: f64,
}

struct Desk {
    spec: CorpusSpec,
    corpus: Corpus,
    judges: Judges,
    runs: Vec<Trained>,
}

impl Desk {
    fn get(&self, run: Run, seed: u64) -> &Trained {
        self.runs.iter().find(|t| t.run == run && t.seed == seed).expect("every run is trained")
    }

    fn seconds(&self, runs: &[Run]) -> f64 {
        self.runs.iter().filter(|t| runs.contains(&t.run)).map(|t| t.seconds).sum()
    }
}

/// SHA-256 over the library sources, so cached runs go stale with the code.
fn source_key() -> String {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let mut files = Vec::new();
    for dir in [root.join("src"), root.join("../autograd/src")] {
        collect_sources(&dir, &mut files);
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(root).unwrap_or(&f).to_string_lossy().as_bytes());
        h.update(fs::read(&f).expect("source readable"));
    }
    hex::encode(&h.finalize()[..8])
}

fn collect_sources(dir: &Path, out: &mut Vec<PathBuf>) {
    for entry in fs::read_dir(dir).expect("source dir readable") {
        let path = entry.expect("dir entry").path();
        if path.is_dir() {
            collect_sources(&path, out);
        } else if path.extension().is_some_and(|e| e == "rs") {
            out.push(path);
        }
    }
}

fn train_cached(corpus: &Corpus, cfg: &TrainConfig, dir: &Path) -> pseudoheal::Result<(ModelBundle, f64)> {
    let start = Instant::now();
    let run = run_training(corpus, cfg, dir, false)?;
    let timing = dir.join(TRAIN_SECONDS);
    let seconds = if run.trained {
        let s = start.elapsed().as_secs_f64();
        fs::write(&timing, format!("{s}\n")).map_err(|e| pseudoheal::Error::io(&timing, e))?;
        s
    } else {
        fs::read_to_string(&timing).ok().and_then(|t| t.trim().parse().ok()).unwrap_or(f64::NAN)
    };
    Ok((run.bundle, seconds))
}

fn desk() -> pseudoheal::Result<Desk> {
    let cache = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(source_key());
    eprintln!("desk runs cached in {}", cache.display());
    let spec = CorpusSpec::default();
    let corpus = build_phantom_corpus(&spec)?;
    let judges = train_judges(&corpus, &EvalOptions::default())?;
    eprintln!(
        "judge segmentor Dice {:.3}, deformation classifier accuracy {:.3}",
        judges.segmentor_dice, judges.dec_accuracy
    );
    let mut runs = Vec::new();
    for seed in SEEDS {
        for run in Run::ALL {
            let dir = cache.join(format!("seed_{seed}")).join(run.name());
            let (bundle, seconds) = train_cached(&corpus, &run.config(seed), &dir)?;
            let report = evaluate_run(run.name(), &bundle, &corpus, &judges)?;
            let seg = report.dice_segmentor.map(|d| format!("{d:.3}")).unwrap_or_else(|| "-".into());
            eprintln!(
                "seed {seed} {:<12} h={:.3} iD={:.3} DeC={:.3} dice_seg={seg} ({seconds:.0} s)",
                run.name(),
                report.h,
                report.identity,
                report.dec
            );
            runs.push(Trained {
                run,
                seed,
                bundle,
                report,
                seconds,
            });
        }
    }
    Ok(Desk { spec, corpus, judges, runs })
}

/// Mean l1 of the Cycle H-H image and mask residuals on held-out healthy slices.
fn cycle_hh_residual(bundle: &ModelBundle, corpus: &Corpus) -> pseudoheal::Result<f64> {
    let healthy = corpus.pool(DomainTag::HealthyPool, Split::Test)?;
    let images: Vec<_> = healthy.images().into_iter().cloned().collect();
    let (s, r) = (bundle.segmentor()?, bundle.reconstructor()?);
    let per_sample = in_chunks(&images, |x| {
        let zero = Tensor::zeros(x.shape().to_vec());
        let fake = forward_r(r, x, &zero)?;
        let back = forward_g(&bundle.g, &fake)?;
        let mask = tensor_to_soft(&forward_s(s, &fake)?)?;
        let n = x.sample_len() as f64;
        Ok((0..x.batch())
            .map(|b| {
                let img: f64 = back.sample(b).iter().zip(x.sample(b)).map(|(a, c)| (a - c).abs()).sum::<f64>() / n;
                let m: f64 = mask[b].iter().map(|v| v.abs()).sum::<f64>() / n;
                img + m
            })
            .collect())
    })?;
    Ok(per_sample.iter().sum::<f64>() / per_sample.len() as f64)
}

fn timed(check: impl FnOnce() -> Check, budget_seconds: f64) -> Check {
    let start = Instant::now();
    let detail = check()?;
    let s = start.elapsed().as_secs_f64();
    if s > budget_seconds {
        return Err(format!("{detail}; took {s:.1} s, budget {budget_seconds:.0} s"));
    }
    Ok(format!("{detail} ({s:.1} s)"))
}

fn criterion_4(d: &Desk) -> Check {
    let t = d.get(Run::Paired, SEEDS[0]);
    let residual = cycle_hh_residual(&t.bundle, &d.corpus).map_err(|e| e.to_string())?;
    let r = &t.report;
    let detail = format!(
        "{} training-corpus slices (+{} deformed healthy for DeC), {} epochs in {:.0} s; \
         Cycle H-H residual {residual:.4}; h {:.3} (judge Dice {:.3}); iD {:.3}",
        d.spec.count,
        d.spec.deformed_healthy,
        t.bundle.config.epochs,
        t.seconds,
        r.h,
        d.judges.segmentor_dice,
        r.identity
    );
    let ok = t.seconds <= DESK_RUN_SECONDS
        && residual <= CYCLE_HH_MAX
        && r.h >= H_MIN
        && d.judges.segmentor_dice >= JUDGE_DICE_MIN
        && r.identity >= ID_MIN;
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn seed_count(holds: impl Fn(u64) -> bool) -> usize {
    SEEDS.iter().filter(|&&s| holds(s)).count()
}

fn criterion_5(d: &Desk) -> Check {
    let id = |run, seed| d.get(run, seed).report.identity;
    let mut per_seed = Vec::new();
    for seed in SEEDS {
        per_seed.push(format!(
            "seed {seed}: paired {:.3} unpaired {:.3} cyclegan {:.3} | full {:.3} no-H-H {:.3}",
            id(Run::Paired, seed),
            id(Run::Unpaired, seed),
            id(Run::Cyclegan, seed),
            id(Run::Paired, seed),
            id(Run::NoCycleHh, seed)
        ));
    }
    let n = seed_count(|s| {
        id(Run::Paired, s) > id(Run::Unpaired, s)
            && id(Run::Unpaired, s) > id(Run::Cyclegan, s)
            && id(Run::Paired, s) > id(Run::NoCycleHh, s)
    });
    let seconds = d.seconds(&[Run::Paired, Run::Unpaired, Run::Cyclegan, Run::NoCycleHh]);
    let detail = format!("ordered in {n}/3 seeds, {seconds:.0} s training; {}", per_seed.join("; "));
    if n >= SEEDS_NEEDED && seconds <= ORDERING_SECONDS {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_6(d: &Desk) -> Check {
    // Ratio 0 and 1 are the unpaired and paired runs.
    let ratios = [(0.0, Run::Unpaired), (0.5, Run::Semi), (1.0, Run::Paired)];
    let id = |run, seed| d.get(run, seed).report.identity;
    let n = seed_count(|s| id(Run::Paired, s) >= id(Run::Unpaired, s));
    let mean_h: Vec<f64> = ratios
        .iter()
        .map(|&(_, run)| SEEDS.iter().map(|&s| d.get(run, s).report.h).sum::<f64>() / SEEDS.len() as f64)
        .collect();
    let spread = mean_h.iter().cloned().fold(f64::MIN, f64::max) - mean_h.iter().cloned().fold(f64::MAX, f64::min);
    let seconds = d.seconds(&[Run::Unpaired, Run::Semi, Run::Paired]);
    let detail = format!(
        "iD(1.0) >= iD(0.0) in {n}/3 seeds; mean h by ratio {}; spread {spread:.3}; {seconds:.0} s training",
        ratios
            .iter()
            .zip(&mean_h)
            .map(|((r, _), h)| format!("{r:.1}: {h:.3}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    if n >= SEEDS_NEEDED && spread < H_SPREAD_MAX && seconds <= SWEEP_SECONDS {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_7(d: &Desk) -> Check {
    let t = d.get(Run::Paired, SEEDS[0]);
    let test = d.corpus.pool(DomainTag::PathologicalPool, Split::Test).map_err(|e| e.to_string())?;
    let images: Vec<_> = test.images().into_iter().cloned().collect();
    let report = mask_shift_test(&t.bundle, &images, MASK_SHIFT).map_err(|e| e.to_string())?;
    let frac = report.pass_fraction();
    let detail = format!("{frac:.3} of {} test lesions pass the {MASK_SHIFT} px shift", report.cases.len());
    if frac >= MASK_SHIFT_MIN {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_9(d: &Desk) -> Check {
    let dice = |run, seed| d.get(run, seed).report.dice_segmentor.unwrap_or(f64::NAN);
    let n = seed_count(|s| dice(Run::Unpaired, s) >= UNPAIRED_DICE_MIN && dice(Run::Paired, s) >= dice(Run::Unpaired, s));
    let detail = format!(
        "holds in {n}/3 seeds; {}",
        SEEDS
            .iter()
            .map(|&s| format!("seed {s}: paired {:.3} unpaired {:.3}", dice(Run::Paired, s), dice(Run::Unpaired, s)))
            .collect::<Vec<_>>()
            .join("; ")
    );
    if n >= SEEDS_NEEDED {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn report(n: usize, title: &str, result: &Check) -> bool {
    match result {
        Ok(detail) => println!("PASS {n:>2} {title}: {detail}"),
        Err(detail) => println!("FAIL {n:>2} {title}: {detail}"),
    }
    result.is_ok()
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Check)> = vec![
        (1, "loss oracles", timed(common::check_loss_oracles, 60.0)),
        (2, "gradient checks", timed(common::check_gradients, 120.0)),
        (3, "metric oracles", timed(common::check_metric_oracles, 60.0)),
        (8, "study statistics", timed(common::check_study_statistics, 60.0)),
        (10, "reproducibility", common::check_reproducibility()),
    ];
    match desk() {
        Ok(d) => {
            results.push((4, "desk-scale training run", criterion_4(&d)));
            results.push((5, "qualitative identity ordering", criterion_5(&d)));
            results.push((6, "semi-supervised sweep", criterion_6(&d)));
            results.push((7, "mask-shift diagnostic", criterion_7(&d)));
            results.push((9, "unsupervised segmentation", criterion_9(&d)));
        }
        Err(e) => {
            for (n, title) in [
                (4, "desk-scale training run"),
                (5, "qualitative identity ordering"),
                (6, "semi-supervised sweep"),
                (7, "mask-shift diagnostic"),
                (9, "unsupervised segmentation"),
            ] {
                results.push((n, title, Err(format!("desk runs failed: {e}"))));
            }
        }
    }
    results.sort_by_key(|r| r.0);
    let mut all = true;
    for (n, title, result) in &results {
        all &= report(*n, title, result);
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
