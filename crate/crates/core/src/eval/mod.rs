//! Quantitative evaluation: healthiness (h), identity (iD), deformation
//! correction (DeC), Dice scores, and diagnostic experiments.

pub mod canny;
pub mod diagnostics;
pub mod judge;
pub mod metrics;
pub mod report;
pub mod ssim;

pub use canny::{canny, edge_image, edge_map};
pub use diagnostics::{
    information_hiding, iterate_generator, mask_shift_test, pseudo_disease, pseudo_disease_iou,
    reconstruction_degradation, shift_toward_center, Degradation, IterationMetrics, MaskShiftCase, MaskShiftReport,
    MASK_SHIFT,
};
pub use judge::{DecClassifier, JudgeConfig, JudgeSegmentor, Labelled};
pub use metrics::{
    dec_score, dec_scores, dice_score, diff_map_dice, diff_map_segmentation, healthiness, identity,
    identity_scores, segmentor_dice, DeformationJudge, Healthiness, PathologyJudge, DIFF_THRESHOLD,
    JUDGE_THRESHOLD,
};
pub use report::{evaluate, read_report_csv, report_rows, write_report_csv, MetricReport, ReportRow, SampleMetrics};
pub use ssim::{ms_ssim, ssim};
