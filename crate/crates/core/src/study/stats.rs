//! Consensus scores, bootstrapped paired t-tests, point-biserial
//! correlation and realness ratios.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scores::ResolvedScore;
use super::Criterion;
use crate::eval::metrics::{mean, std_dev};
use crate::{Error, Result};

/// Bootstrap resamples per test.
pub const BOOTSTRAP_RESAMPLES: usize = 10_000;

/// Mean score across raters, keyed by criterion, method and panel.
pub type Consensus = BTreeMap<(Criterion, String), BTreeMap<usize, f64>>;

/// Averages the binary scores of all raters per image, method and criterion.
pub fn consensus(scores: &[ResolvedScore]) -> Consensus {
    let mut sums: BTreeMap<(Criterion, String), BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for s in scores {
        let e = sums
            .entry((s.criterion, s.method_id.clone()))
            .or_default()
            .entry(s.panel_id)
            .or_default();
        e.0 += f64::from(u8::from(s.score));
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(k, per_panel)| (k, per_panel.into_iter().map(|(p, (s, n))| (p, s / n as f64)).collect()))
        .collect()
}

/// Summary of one method under one criterion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionSummary {
    pub criterion: Criterion,
    pub method_id: String,
    /// Images with at least one score.
    pub n_images: usize,
    /// Mean of the per-image consensus scores.
    pub mean: f64,
    /// Sample standard deviation of the per-image consensus scores.
    pub std: f64,
    /// Highest-scoring method for this criterion.
    pub best_method: String,
    /// Bootstrap p-value against `best_method`; absent for the best method.
    pub p_value: Option<f64>,
}

/// Per-method consensus statistics with p-values against the best method of
/// each criterion, paired over images scored for both methods.
pub fn aggregate(scores: &[ResolvedScore], seed: u64) -> Result<Vec<CriterionSummary>> {
    if scores.is_empty() {
        return Err(Error::Validation("no scores to aggregate".into()));
    }
    let cons = consensus(scores);
    let mut out = Vec::new();
    for criterion in Criterion::ALL {
        let methods: Vec<(&String, &BTreeMap<usize, f64>)> = cons
            .iter()
            .filter(|((c, _), _)| *c == criterion)
            .map(|((_, m), v)| (m, v))
            .collect();
        let Some(&(best, best_scores)) = methods.iter().max_by(|a, b| {
            let (ma, mb) = (mean_of(a.1), mean_of(b.1));
            // Ties go to the lexicographically first method.
            ma.total_cmp(&mb).then_with(|| b.0.cmp(a.0))
        }) else {
            continue;
        };
        for (m, v) in &methods {
            let values: Vec<f64> = v.values().copied().collect();
            let p_value = if *m == best {
                None
            } else {
                let diffs: Vec<f64> = v
                    .iter()
                    .filter_map(|(p, s)| best_scores.get(p).map(|b| b - s))
                    .collect();
                Some(bootstrap_paired_t_test(&diffs, BOOTSTRAP_RESAMPLES, seed)?)
            };
            out.push(CriterionSummary {
                criterion,
                method_id: (*m).clone(),
                n_images: values.len(),
                mean: mean(&values),
                std: std_dev(&values),
                best_method: best.clone(),
                p_value,
            });
        }
    }
    Ok(out)
}

fn mean_of(v: &BTreeMap<usize, f64>) -> f64 {
    v.values().sum::<f64>() / v.len() as f64
}

fn t_statistic(d: &[f64]) -> Option<f64> {
    let sd = std_dev(d);
    (sd > 0.0).then(|| mean(d) / (sd / (d.len() as f64).sqrt()))
}

/// Two-sided bootstrap p-value of a paired t-test on differences `diffs`.
/// Resamples the mean-centred differences and counts resampled |t| at least
/// as large as the observed one.
pub fn bootstrap_paired_t_test(diffs: &[f64], resamples: usize, seed: u64) -> Result<f64> {
    if diffs.len() < 2 {
        return Err(Error::UndefinedMetric {
            metric: "bootstrap p-value",
            reason: format!("needs at least 2 paired images, got {}", diffs.len()),
        });
    }
    if resamples == 0 {
        return Err(Error::config("resamples", "must be at least 1"));
    }
    let Some(t_obs) = t_statistic(diffs) else {
        // Constant differences: no evidence when they are all zero, certain otherwise.
        return Ok(if mean(diffs) == 0.0 { 1.0 } else { 0.0 });
    };
    let m = mean(diffs);
    let centred: Vec<f64> = diffs.iter().map(|d| d - m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = vec![0.0; diffs.len()];
    let mut extreme = 0usize;
    for _ in 0..resamples {
        for s in sample.iter_mut() {
            *s = centred[rng.gen_range(0..centred.len())];
        }
        let t = t_statistic(&sample).unwrap_or(0.0);
        if t.abs() >= t_obs.abs() {
            extreme += 1;
        }
    }
    Ok(extreme as f64 / resamples as f64)
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Validation(format!(
            "Pearson needs two equally long series of length >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric {
            metric: "Pearson",
            reason: "a series is constant".into(),
        });
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Point-biserial correlation `(M1 - M0) / s * sqrt(n1 n0 / n^2)` with `s`
/// the population standard deviation of `continuous`.
pub fn point_biserial(binary: &[bool], continuous: &[f64]) -> Result<f64> {
    if binary.len() != continuous.len() {
        return Err(Error::Validation(format!(
            "{} binary values for {} continuous values",
            binary.len(),
            continuous.len()
        )));
    }
    let n = binary.len() as f64;
    let ones: Vec<f64> = continuous.iter().zip(binary).filter(|(_, b)| **b).map(|(c, _)| *c).collect();
    let zeros: Vec<f64> = continuous.iter().zip(binary).filter(|(_, b)| !**b).map(|(c, _)| *c).collect();
    if ones.is_empty() || zeros.is_empty() {
        return Err(Error::UndefinedMetric {
            metric: "point-biserial",
            reason: "both binary groups must be present".into(),
        });
    }
    let m = mean(continuous);
    let s = (continuous.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / n).sqrt();
    if s == 0.0 {
        return Err(Error::UndefinedMetric {
            metric: "point-biserial",
            reason: "the continuous values are constant".into(),
        });
    }
    let (n1, n0) = (ones.len() as f64, zeros.len() as f64);
    Ok((mean(&ones) - mean(&zeros)) / s * (n1 * n0 / (n * n)).sqrt())
}

/// Point-biserial correlation of the raw binary scores for `criterion` with
/// a quantitative metric of the same image, keyed by `(method_id, panel_id)`.
pub fn score_metric_correlation(
    scores: &[ResolvedScore],
    criterion: Criterion,
    metric: &BTreeMap<(String, usize), f64>,
) -> Result<f64> {
    let mut binary = Vec::new();
    let mut values = Vec::new();
    for s in scores.iter().filter(|s| s.criterion == criterion) {
        let v = metric.get(&(s.method_id.clone(), s.panel_id)).ok_or_else(|| {
            Error::Validation(format!(
                "no metric value for method `{}` on panel {}",
                s.method_id, s.panel_id
            ))
        })?;
        binary.push(s.score);
        values.push(*v);
    }
    point_biserial(&binary, &values)
}

/// One "real or fake" call by a rater.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RealnessCall {
    pub rater_id: String,
    pub image_id: String,
    /// Method that produced the image, or the benchmark source for real images.
    pub source: String,
    pub called_real: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealnessRow {
    pub source: String,
    pub n_calls: usize,
    pub real_calls: usize,
    /// Fraction of calls that said "real".
    pub realness: f64,
    /// True for the real healthy images.
    pub benchmark: bool,
}

/// Realness ratio per source, benchmark row first, then sources by name.
pub fn realness_summary(calls: &[RealnessCall], benchmark_source: &str) -> Result<Vec<RealnessRow>> {
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for c in calls {
        let e = counts.entry(c.source.as_str()).or_default();
        e.0 += 1;
        e.1 += usize::from(c.called_real);
    }
    if !counts.contains_key(benchmark_source) {
        return Err(Error::Validation(format!(
            "no calls for the benchmark source `{benchmark_source}`"
        )));
    }
    let mut rows: Vec<RealnessRow> = counts
        .into_iter()
        .map(|(source, (n, real))| RealnessRow {
            source: source.to_string(),
            n_calls: n,
            real_calls: real,
            realness: real as f64 / n as f64,
            benchmark: source == benchmark_source,
        })
        .collect();
    rows.sort_by_key(|r| !r.benchmark);
    Ok(rows)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_summary_csv(path: &Path, rows: &[CriterionSummary]) -> Result<()> {
    write_rows(path, rows)
}

pub fn write_realness_csv(path: &Path, rows: &[RealnessRow]) -> Result<()> {
    write_rows(path, rows)
}
