//! Command implementations.

use std::fs;
use std::path::{Path, PathBuf};

use pseudoheal::data::{
    build_phantom_corpus, center_crop, histogram_check, label_slice, load_dataset, save_dataset, Corpus, Split,
};
use pseudoheal::eval::{read_report_csv, write_report_csv, MetricReport};
use pseudoheal::experiment::{
    evaluate_run, load_run, ratio_dir, run_training, semi_config, summarize, train_judges, variant_config,
    write_summary, ExperimentConfig, Judges, VARIANTS,
};
use pseudoheal::image::PathologyMask;
use pseudoheal::nets::forward_g;
use pseudoheal::study::{
    aggregate, build_panels, ingest_scores, read_blinding_map, realness_summary, write_panels, write_realness_csv,
    write_summary_csv, MethodImages, RealnessCall,
};
use pseudoheal::{Error, ImageSlice, Label, Result};

use crate::ConfigArgs;

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.phantom.phantom.seed = seed;
        cfg.train.seed = seed;
        cfg.eval.judge.seed = seed;
        cfg.eval.dec.seed = seed.wrapping_add(1);
    }
    Ok(cfg)
}

fn load_corpus(cfg: &ExperimentConfig, data: Option<PathBuf>) -> Result<Corpus> {
    load_dataset(&data.unwrap_or_else(|| cfg.paths.data.clone()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn phantom(args: &ConfigArgs, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(args)?;
    let out = out.unwrap_or_else(|| cfg.paths.data.clone());
    let corpus = build_phantom_corpus(&cfg.phantom)?;
    save_dataset(&corpus, &out)?;
    println!("wrote {} slices to {}", corpus.records.len(), out.display());
    Ok(())
}

pub fn prepare(args: &ConfigArgs, data: Option<PathBuf>, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let mut corpus = load_corpus(&cfg, data)?;
    let crop = cfg.preprocess.crop;
    for r in &mut corpus.records {
        let s = &mut r.sample;
        if s.image.shape() == crop {
            continue;
        }
        s.image = center_crop(&s.image, crop);
        let as_image = ImageSlice::from_fn(s.mask.height(), s.mask.width(), |y, x| f32::from(u8::from(s.mask.get(y, x))));
        let cropped = center_crop(&as_image, crop);
        s.mask = PathologyMask::from_fn(crop.0, crop.1, |y, x| cropped.get(y, x) > 0.5);
        s.label = label_slice(s.mask.data())?;
    }
    corpus.check_disjoint()?;
    save_dataset(&corpus, out)?;
    let mut csv = String::from("split,healthy,pathological,js_divergence\n");
    for split in [Split::Train, Split::Val, Split::Test] {
        let of = |label| {
            corpus
                .records
                .iter()
                .filter(move |r| r.split == split && r.sample.label == label)
                .map(|r| &r.sample.image)
        };
        let (nh, np) = (of(Label::Healthy).count(), of(Label::Pathological).count());
        let js = if nh > 0 && np > 0 {
            format!("{:.6}", histogram_check(of(Label::Healthy), of(Label::Pathological))?)
        } else {
            String::new()
        };
        csv.push_str(&format!("{split:?},{nh},{np},{js}\n").to_lowercase());
    }
    write_text(&out.join("histogram_check.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn train(args: &ConfigArgs, data: Option<PathBuf>, out: &Path, verbose: bool) -> Result<()> {
    let cfg = load_config(args)?;
    let corpus = load_corpus(&cfg, data)?;
    let run = run_training(&corpus, &cfg.train, out, verbose)?;
    let what = if run.trained { "trained" } else { "reused" };
    println!("{what} {} (step {}, sha256 {})", out.display(), run.bundle.step, run.model_hash);
    Ok(())
}

fn judges(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Judges> {
    let j = train_judges(corpus, &cfg.eval)?;
    eprintln!(
        "judge segmentor test Dice {:.3}, deformation classifier test accuracy {:.3}",
        j.segmentor_dice, j.dec_accuracy
    );
    Ok(j)
}

fn print_report(r: &MetricReport) {
    let seg = r.dice_segmentor.map(|d| format!("{d:.3}")).unwrap_or_else(|| "-".into());
    println!(
        "{:<18} h={:.3} iD={:.3} DeC={:.3} dice_diff={:.3} dice_seg={seg} n={}",
        r.method, r.h, r.identity, r.dec, r.dice_diffmap, r.n_samples
    );
}

fn dir_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

pub fn eval(args: &ConfigArgs, run_dir: &Path, data: Option<PathBuf>, report: &Path, method: Option<String>) -> Result<()> {
    let cfg = load_config(args)?;
    let corpus = load_corpus(&cfg, data)?;
    let bundle = load_run(run_dir)?;
    let j = judges(&cfg, &corpus)?;
    let r = evaluate_run(&method.unwrap_or_else(|| dir_name(run_dir)), &bundle, &corpus, &j)?;
    print_report(&r);
    write_report_csv(report, &[r])
}

/// Trains (or reuses) each named configuration, scores it and writes the
/// per-run reports plus a joined summary under `out`.
fn sweep(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    out: &Path,
    runs: Vec<(String, pseudoheal::train::TrainConfig)>,
    verbose: bool,
) -> Result<()> {
    let j = judges(cfg, corpus)?;
    let mut reports = Vec::with_capacity(runs.len());
    for (name, train_cfg) in runs {
        let run_dir = out.join(&name);
        let run = run_training(corpus, &train_cfg, &run_dir, verbose)?;
        let r = evaluate_run(&name, &run.bundle, corpus, &j)?;
        write_report_csv(&run_dir.join("report.csv"), std::slice::from_ref(&r))?;
        print_report(&r);
        reports.push(r);
    }
    let all = out.join("reports.csv");
    write_report_csv(&all, &reports)?;
    write_summary(&out.join("summary.csv"), &summarize(&read_report_csv(&all)?)?)
}

pub fn sweep_semi(args: &ConfigArgs, data: Option<PathBuf>, out: Option<PathBuf>, ratios: &[f64], verbose: bool) -> Result<()> {
    let cfg = load_config(args)?;
    if ratios.is_empty() {
        return Err(Error::config("ratios", "at least one ratio is required"));
    }
    if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::config("ratios", format!("{r} is outside [0, 1]")));
    }
    let corpus = load_corpus(&cfg, data)?;
    let out = out.unwrap_or_else(|| cfg.paths.runs.join("sweep_semi"));
    let runs = ratios.iter().map(|&r| (ratio_dir(r), semi_config(&cfg.train, r))).collect();
    sweep(&cfg, &corpus, &out, runs, verbose)
}

pub fn ablate(args: &ConfigArgs, data: Option<PathBuf>, out: Option<PathBuf>, variants: &[String], verbose: bool) -> Result<()> {
    let cfg = load_config(args)?;
    let names: Vec<String> = if variants.is_empty() {
        VARIANTS.iter().map(|v| v.to_string()).collect()
    } else {
        variants.to_vec()
    };
    let runs = names
        .into_iter()
        .map(|v| Ok((v.clone(), variant_config(&cfg.train, &v)?)))
        .collect::<Result<Vec<_>>>()?;
    let corpus = load_corpus(&cfg, data)?;
    let out = out.unwrap_or_else(|| cfg.paths.runs.join("ablation"));
    sweep(&cfg, &corpus, &out, runs, verbose)
}

pub fn panels(data: &Path, runs: &[String], out: &Path, blinding: &Path, count: usize, seed: u64) -> Result<()> {
    let corpus = load_dataset(data)?;
    let test: Vec<_> = corpus
        .records
        .iter()
        .filter(|r| r.split == Split::Test && r.sample.label == Label::Pathological)
        .take(count)
        .map(|r| &r.sample)
        .collect();
    if test.is_empty() {
        return Err(Error::Validation("the dataset has no pathological test slices".into()));
    }
    let inputs: Vec<ImageSlice> = test.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<&PathologyMask> = test.iter().map(|s| &s.mask).collect();
    let mut methods = Vec::with_capacity(runs.len());
    for spec in runs {
        let (name, dir) = spec
            .split_once('=')
            .ok_or_else(|| Error::config("run", format!("`{spec}` is not of the form method=RUNDIR")))?;
        let bundle = load_run(Path::new(dir))?;
        let images = pseudoheal::eval::metrics::map_images(&inputs, |x| forward_g(&bundle.g, x))?;
        methods.push(MethodImages {
            method_id: name.to_string(),
            images,
        });
    }
    let (panels, map) = build_panels(&methods, &inputs, &masks, seed)?;
    write_panels(&panels, &map, out, blinding)?;
    println!("wrote {} panels to {}", panels.len(), out.display());
    Ok(())
}

pub fn scores(
    scores: &Path,
    blinding: &Path,
    out: &Path,
    realness: Option<&Path>,
    benchmark: &str,
    seed: u64,
) -> Result<()> {
    let map = read_blinding_map(blinding)?;
    let resolved = ingest_scores(scores, &map)?;
    let summary = aggregate(&resolved, seed)?;
    write_summary_csv(out, &summary)?;
    for s in &summary {
        let p = s.p_value.map(|p| format!("{p:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "{:<24} {:<18} {:.3} ± {:.3} (n={}, p vs {}={p})",
            s.criterion.as_str(),
            s.method_id,
            s.mean,
            s.std,
            s.n_images,
            s.best_method
        );
    }
    if let Some(path) = realness {
        let mut r = csv::Reader::from_path(path)?;
        let calls = r.deserialize().collect::<std::result::Result<Vec<RealnessCall>, _>>()?;
        let rows = realness_summary(&calls, benchmark)?;
        let dest = out.with_file_name("realness.csv");
        write_realness_csv(&dest, &rows)?;
        for row in rows {
            println!("realness {:<18} {:.3} ({} calls)", row.source, row.realness, row.n_calls);
        }
    }
    Ok(())
}

pub fn report(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for path in inputs {
        rows.extend(read_report_csv(path)?);
    }
    let summary = summarize(&rows)?;
    write_summary(out, &summary)?;
    println!("wrote {} summary rows to {}", summary.len(), out.display());
    Ok(())
}
