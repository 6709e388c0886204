//! Human-evaluation tooling: blinded panels, score ingestion and the
//! statistics computed over rater judgements.

pub mod panels;
pub mod scores;
pub mod stats;

use serde::{Deserialize, Serialize};

pub use panels::{
    build_panels, read_blinding_map, render_montage, write_blinding_map, write_panels, BlindingEntry, BlindingMap,
    MethodImages, Panel, SCORES_TEMPLATE,
};
pub use scores::{ingest_scores, parse_scores, RaterScore, ResolvedScore};
pub use stats::{
    aggregate, bootstrap_paired_t_test, consensus, pearson, point_biserial, realness_summary, score_metric_correlation,
    write_realness_csv, write_summary_csv, CriterionSummary, RealnessCall, RealnessRow, BOOTSTRAP_RESAMPLES,
};

/// What a rater judges on each synthetic image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Identity,
    Healthiness,
    DeformationCorrection,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Self::Identity, Self::Healthiness, Self::DeformationCorrection];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Healthiness => "healthiness",
            Self::DeformationCorrection => "deformation_correction",
        }
    }
}
