//! Evaluation of a trained model on a test set and the metrics CSV.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{
    dec_scores, diff_map_dice, healthiness, identity_scores, map_images, mean, segmentor_dice, std_dev,
    DeformationJudge, PathologyJudge,
};
use crate::data::Dataset;
use crate::image::{ImageSlice, PathologyMask};
use crate::nets::forward_g;
use crate::train::ModelBundle;
use crate::{Error, Result};

/// Per-image values behind a [`MetricReport`].
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub subject_id: u64,
    pub identity: f64,
    pub dec: f64,
    pub dice_diffmap: f64,
    /// Absent for models without a Segmentor.
    pub dice_segmentor: Option<f64>,
    pub judge_synth: usize,
    pub judge_input: usize,
}

/// Aggregate metrics of one method on one test set.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub h: f64,
    pub identity: f64,
    pub dec: f64,
    pub dice_diffmap: f64,
    pub dice_segmentor: Option<f64>,
    pub n_samples: usize,
    pub samples: Vec<SampleMetrics>,
}

impl MetricReport {
    pub fn identity_values(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.identity).collect()
    }

    fn column(&self, f: impl Fn(&SampleMetrics) -> Option<f64>) -> Vec<f64> {
        self.samples.iter().filter_map(f).collect()
    }
}

/// Scores `G` of `bundle` on the pathological slices of `test`.
pub fn evaluate(
    method: &str,
    bundle: &ModelBundle,
    test: &Dataset,
    judge: &dyn PathologyJudge,
    clf: &dyn DeformationJudge,
) -> Result<MetricReport> {
    if test.is_empty() {
        return Err(Error::Validation("empty test set".into()));
    }
    let x_p: Vec<ImageSlice> = test.samples.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<&PathologyMask> = test.masks();
    let x_tilde = map_images(&x_p, |x| forward_g(&bundle.g, x))?;
    let health = healthiness(&x_tilde, &x_p, judge)?;
    let id = identity_scores(&x_p, &x_tilde, &masks)?;
    let dec = dec_scores(&x_tilde, clf)?;
    let diff = diff_map_dice(&x_p, &x_tilde, &masks)?;
    let seg = match &bundle.s {
        Some(s) => Some(segmentor_dice(s, &x_p, &masks)?),
        None => None,
    };
    let samples: Vec<SampleMetrics> = (0..x_p.len())
        .map(|i| SampleMetrics {
            subject_id: test.samples[i].subject_id,
            identity: id[i],
            dec: dec[i],
            dice_diffmap: diff[i],
            dice_segmentor: seg.as_ref().map(|v| v[i]),
            judge_synth: health.synth_counts[i],
            judge_input: health.input_counts[i],
        })
        .collect();
    Ok(MetricReport {
        method: method.to_string(),
        h: health.h,
        identity: mean(&id),
        dec: mean(&dec),
        dice_diffmap: mean(&diff),
        dice_segmentor: seg.as_deref().map(mean),
        n_samples: samples.len(),
        samples,
    })
}

/// One CSV line: a per-sample row (`row` = index) or an aggregate row
/// (`row` = `mean` or `std`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub row: String,
    pub subject_id: Option<u64>,
    pub n: usize,
    pub h: Option<f64>,
    pub identity: f64,
    pub dec: f64,
    pub dice_diffmap: f64,
    pub dice_segmentor: Option<f64>,
    pub judge_synth: Option<usize>,
    pub judge_input: Option<usize>,
}

impl ReportRow {
    pub fn is_aggregate(&self) -> bool {
        self.row == "mean" || self.row == "std"
    }
}

/// Rows of `report`: per-sample rows then the `mean` and `std` rows. The
/// aggregate `h` is the ratio of mean judge counts; its dispersion is
/// reported as the std of per-image ratios over slices the judge flags.
pub fn report_rows(report: &MetricReport) -> Vec<ReportRow> {
    let n = report.n_samples;
    let per_image_h = |s: &SampleMetrics| (s.judge_input > 0).then(|| 1.0 - s.judge_synth as f64 / s.judge_input as f64);
    let mut rows: Vec<ReportRow> = report
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| ReportRow {
            method: report.method.clone(),
            row: i.to_string(),
            subject_id: Some(s.subject_id),
            n: 1,
            h: per_image_h(s),
            identity: s.identity,
            dec: s.dec,
            dice_diffmap: s.dice_diffmap,
            dice_segmentor: s.dice_segmentor,
            judge_synth: Some(s.judge_synth),
            judge_input: Some(s.judge_input),
        })
        .collect();
    rows.push(ReportRow {
        method: report.method.clone(),
        row: "mean".into(),
        subject_id: None,
        n,
        h: Some(report.h),
        identity: report.identity,
        dec: report.dec,
        dice_diffmap: report.dice_diffmap,
        dice_segmentor: report.dice_segmentor,
        judge_synth: None,
        judge_input: None,
    });
    let seg = report.column(|s| s.dice_segmentor);
    rows.push(ReportRow {
        method: report.method.clone(),
        row: "std".into(),
        subject_id: None,
        n,
        h: Some(std_dev(&report.column(per_image_h))),
        identity: std_dev(&report.identity_values()),
        dec: std_dev(&report.column(|s| Some(s.dec))),
        dice_diffmap: std_dev(&report.column(|s| Some(s.dice_diffmap))),
        dice_segmentor: (!seg.is_empty()).then(|| std_dev(&seg)),
        judge_synth: None,
        judge_input: None,
    });
    rows
}

/// Writes the rows of every report to one CSV file.
pub fn write_report_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        for row in report_rows(r) {
            w.serialize(row)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a CSV written by [`write_report_csv`].
pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?;
    Ok(rows)
}
