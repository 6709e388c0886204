//! Experiment plumbing shared by the command line and the acceptance suite:
//! the JSON experiment document, run directories, evaluation networks and
//! the summary table joined from metric reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CorpusSpec, PreprocessConfig, Split};
use crate::data::{Corpus, DomainTag};
use crate::eval::{evaluate, DecClassifier, JudgeConfig, JudgeSegmentor, Labelled, MetricReport, ReportRow, MASK_SHIFT};
use crate::train::{
    file_hash, load_checkpoint, resume_state, save_checkpoint, train, Ablation, Baseline, ModelBundle, Setting,
    TrainConfig, TrainData, TrainOptions,
};
use crate::{Error, Result};

/// Config snapshot written into every run directory.
pub const CONFIG_SNAPSHOT: &str = "config.json";
/// Per-step losses of a run.
pub const LOSSES_CSV: &str = "losses.csv";
/// Final model of a run.
pub const MODEL_FILE: &str = "model.ckpt";

/// Evaluation options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Judge segmentor behind healthiness.
    pub judge: JudgeConfig,
    /// Edge-map classifier behind DeC.
    pub dec: JudgeConfig,
    /// Distance in pixels for the mask-shift test.
    pub mask_shift: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            judge: JudgeConfig::default(),
            dec: JudgeConfig {
                seed: 23,
                ..JudgeConfig::default()
            },
            mask_shift: MASK_SHIFT,
        }
    }
}

/// Output locations; command-line flags override them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: PathBuf,
    pub runs: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            runs: "runs".into(),
            reports: "reports".into(),
        }
    }
}

/// Everything one experiment needs, read from a single JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub phantom: CorpusSpec,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            phantom: CorpusSpec::default(),
            preprocess: PreprocessConfig::phantom(),
            train: TrainConfig::desk(),
            eval: EvalOptions::default(),
            paths: Paths::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a JSON document; errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".into() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.phantom.validate()?;
        if self.phantom.count == 0 {
            return Err(Error::config("phantom.count", "must be at least 1"));
        }
        self.preprocess.validate()?;
        self.train.validate()?;
        self.eval.judge.validate()?;
        self.eval.dec.validate()?;
        if !(self.eval.mask_shift > 0.0 && self.eval.mask_shift.is_finite()) {
            return Err(Error::config("eval.mask_shift", "must be finite and > 0"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serialises")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Training pools and mask pool of a corpus.
pub struct Pools {
    pub pathological: crate::data::Dataset,
    pub healthy: crate::data::Dataset,
    pub mask_pool: crate::data::MaskPool,
}

/// Training pools from the train split; the mask pool comes from the
/// validation split so its subjects never overlap the training inputs.
pub fn training_pools(corpus: &Corpus) -> Result<Pools> {
    Ok(Pools {
        pathological: corpus.pool(DomainTag::PathologicalPool, Split::Train)?,
        healthy: corpus.pool(DomainTag::HealthyPool, Split::Train)?,
        mask_pool: corpus.mask_pool(Split::Val, &Default::default()),
    })
}

/// A finished run directory.
pub struct RunResult {
    pub bundle: ModelBundle,
    /// SHA-256 of the final checkpoint.
    pub model_hash: String,
    /// False when a finished run was found on disk and reused.
    pub trained: bool,
}

/// Trains `cfg` into `run_dir`, or reuses a finished run with the same
/// configuration. An interrupted run continues from its last epoch
/// checkpoint; its loss CSV then covers the resumed steps only.
pub fn run_training(corpus: &Corpus, cfg: &TrainConfig, run_dir: &Path, verbose: bool) -> Result<RunResult> {
    cfg.validate()?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let model_path = run_dir.join(MODEL_FILE);
    if model_path.exists() {
        let (bundle, _) = load_checkpoint(&model_path)?;
        if bundle.config == *cfg {
            return Ok(RunResult {
                model_hash: file_hash(&model_path)?,
                bundle,
                trained: false,
            });
        }
        return Err(Error::config(
            "train",
            format!("{} holds a run with a different configuration", run_dir.display()),
        ));
    }
    write_json(&run_dir.join(CONFIG_SNAPSHOT), cfg)?;
    let pools = training_pools(corpus)?;
    let data = TrainData {
        pathological: &pools.pathological,
        healthy: &pools.healthy,
        mask_pool: &pools.mask_pool,
    };
    let options = TrainOptions {
        checkpoint_dir: Some(run_dir.to_path_buf()),
        resume: resume_state(run_dir)?,
        verbose,
    };
    let out = train(data, cfg, options)?;
    out.log.write_csv(&run_dir.join(LOSSES_CSV))?;
    save_checkpoint(&model_path, &out.bundle, None)?;
    Ok(RunResult {
        model_hash: file_hash(&model_path)?,
        bundle: out.bundle,
        trained: true,
    })
}

/// Loads the final model of a run directory.
pub fn load_run(run_dir: &Path) -> Result<ModelBundle> {
    Ok(load_checkpoint(&run_dir.join(MODEL_FILE))?.0)
}

/// Evaluation networks trained on the corpus, with their held-out quality.
pub struct Judges {
    pub segmentor: JudgeSegmentor,
    pub dec: DecClassifier,
    /// Mean Dice of the judge on test slices with lesions.
    pub segmentor_dice: f64,
    /// Accuracy of the classifier on healthy test slices.
    pub dec_accuracy: f64,
}

fn labelled(corpus: &Corpus, split: Split) -> Vec<Labelled<'_>> {
    corpus
        .records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| (&r.sample.image, &r.sample.mask))
        .collect()
}

/// Trains the judge segmentor on all train slices (fine-tuned on val) and the
/// deformation classifier on healthy slices with and without deformation.
pub fn train_judges(corpus: &Corpus, opts: &EvalOptions) -> Result<Judges> {
    let segmentor = JudgeSegmentor::train(&labelled(corpus, Split::Train), &labelled(corpus, Split::Val), &opts.judge)?;
    let segmentor_dice = segmentor.dice(&labelled(corpus, Split::Test))?;
    let dec = DecClassifier::train(
        &corpus.healthy_with_deformation(Split::Train),
        &corpus.healthy_with_deformation(Split::Val),
        &opts.dec,
    )?;
    let dec_accuracy = dec.accuracy(&corpus.healthy_with_deformation(Split::Test))?;
    Ok(Judges {
        segmentor,
        dec,
        segmentor_dice,
        dec_accuracy,
    })
}

/// Scores a trained model on the pathological test slices.
pub fn evaluate_run(method: &str, bundle: &ModelBundle, corpus: &Corpus, judges: &Judges) -> Result<MetricReport> {
    let test = corpus.pool(DomainTag::PathologicalPool, Split::Test)?;
    evaluate(method, bundle, &test, &judges.segmentor, &judges.dec)
}

/// Training configuration of one semi-supervised sweep point.
pub fn semi_config(base: &TrainConfig, ratio: f64) -> TrainConfig {
    TrainConfig {
        setting: Setting::Semi { ratio },
        ..base.clone()
    }
}

/// Directory name of a sweep point.
pub fn ratio_dir(ratio: f64) -> String {
    format!("ratio_{ratio:.2}")
}

/// Named model variants compared in the ablation table.
pub const VARIANTS: [&str; 6] = ["proposed", "no_cycle_hh", "cycle_hp", "lsgan", "cyclegan", "conditional_gan"];

/// Training configuration of a named variant of `base`.
pub fn variant_config(base: &TrainConfig, variant: &str) -> Result<TrainConfig> {
    let (ablation, baseline) = match variant {
        "proposed" => (Ablation::None, Baseline::None),
        "no_cycle_hh" => (Ablation::NoCycleHh, Baseline::None),
        "cycle_hp" => (Ablation::CycleHp, Baseline::None),
        "lsgan" => (Ablation::Lsgan, Baseline::None),
        "cyclegan" => (Ablation::None, Baseline::Cyclegan),
        "conditional_gan" => (Ablation::None, Baseline::ConditionalGan),
        other => {
            return Err(Error::config(
                "variant",
                format!("unknown variant `{other}`; expected one of {VARIANTS:?}"),
            ))
        }
    };
    Ok(TrainConfig {
        ablation,
        baseline,
        ..base.clone()
    })
}

/// One line of the summary table: the `mean` and `std` rows of a report joined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub n: usize,
    pub h: Option<f64>,
    pub h_std: Option<f64>,
    pub identity: f64,
    pub identity_std: f64,
    pub dec: f64,
    pub dec_std: f64,
    pub dice_diffmap: f64,
    pub dice_diffmap_std: f64,
    pub dice_segmentor: Option<f64>,
    pub dice_segmentor_std: Option<f64>,
}

/// Joins the aggregate rows of report CSVs into one line per method, in
/// first-seen order.
pub fn summarize(rows: &[ReportRow]) -> Result<Vec<SummaryRow>> {
    let mut order: Vec<&str> = Vec::new();
    let mut means: BTreeMap<&str, &ReportRow> = BTreeMap::new();
    let mut stds: BTreeMap<&str, &ReportRow> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.is_aggregate()) {
        let slot = if r.row == "mean" { &mut means } else { &mut stds };
        if slot.insert(r.method.as_str(), r).is_some() {
            return Err(Error::Validation(format!("method `{}` has two `{}` rows", r.method, r.row)));
        }
        if !order.contains(&r.method.as_str()) {
            order.push(&r.method);
        }
    }
    order
        .into_iter()
        .map(|m| {
            let (Some(mean), Some(std)) = (means.get(m), stds.get(m)) else {
                return Err(Error::Validation(format!("method `{m}` lacks a mean or std row")));
            };
            Ok(SummaryRow {
                method: m.to_string(),
                n: mean.n,
                h: mean.h,
                h_std: std.h,
                identity: mean.identity,
                identity_std: std.identity,
                dec: mean.dec,
                dec_std: std.dec,
                dice_diffmap: mean.dice_diffmap,
                dice_diffmap_std: std.dice_diffmap,
                dice_segmentor: mean.dice_segmentor,
                dice_segmentor_std: std.dice_segmentor,
            })
        })
        .collect()
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_name_their_path() {
        let err = ExperimentConfig::from_json(r#"{"train": {"epochs": 3, "epoch": 4}}"#).unwrap_err();
        match err {
            Error::Config { field, .. } => assert!(field.starts_with("train"), "{field}"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"train": {"batch_size": 0}}"#).is_err());
        let ok = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(ok, ExperimentConfig::default());
        assert_eq!(ExperimentConfig::from_json(&ok.to_json()).unwrap(), ok);
    }

    #[test]
    fn variants_map_to_flags() {
        let base = TrainConfig::desk();
        for v in VARIANTS {
            variant_config(&base, v).unwrap().validate().unwrap();
        }
        assert!(variant_config(&base, "vagan").is_err());
    }
}
