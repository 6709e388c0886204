//! Healthiness, identity, deformation correction and Dice scores.

use pseudoheal_autograd::Tensor;

use super::canny::edge_image;
use super::ssim::ms_ssim;
use crate::image::{images_to_tensor, tensor_to_images, tensor_to_soft, ImageSlice, PathologyMask};
use crate::losses::dice_loss_values;
use crate::nets::{forward_s, SegmentorNet};
use crate::{Error, Result};

/// Soft-mask binarisation threshold used by every pixel count.
pub const JUDGE_THRESHOLD: f64 = 0.5;
/// Threshold on `|x_p - x_tilde_h|` for difference-map segmentation.
pub const DIFF_THRESHOLD: f64 = 0.1;
/// Images per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 16;

/// Anything that labels pathology pixels in images.
pub trait PathologyJudge {
    fn segment(&self, images: &[ImageSlice]) -> Result<Vec<PathologyMask>>;
}

impl<F: Fn(&ImageSlice) -> PathologyMask> PathologyJudge for F {
    fn segment(&self, images: &[ImageSlice]) -> Result<Vec<PathologyMask>> {
        Ok(images.iter().map(self).collect())
    }
}

impl PathologyJudge for SegmentorNet {
    fn segment(&self, images: &[ImageSlice]) -> Result<Vec<PathologyMask>> {
        soft_masks(self, images)?
            .into_iter()
            .zip(images)
            .map(|(soft, img)| Ok(PathologyMask::from_soft(img.height(), img.width(), &soft, JUDGE_THRESHOLD)))
            .collect()
    }
}

/// Probability that an edge map comes from a deformation-free slice.
pub trait DeformationJudge {
    /// False for a classifier that has not been fitted.
    fn is_trained(&self) -> bool {
        true
    }

    fn prob_undeformed(&self, edge_maps: &[ImageSlice]) -> Result<Vec<f64>>;
}

impl<F: Fn(&ImageSlice) -> f64> DeformationJudge for F {
    fn prob_undeformed(&self, edge_maps: &[ImageSlice]) -> Result<Vec<f64>> {
        Ok(edge_maps.iter().map(self).collect())
    }
}

/// Runs `f` over `images` in chunks of [`EVAL_CHUNK`] and concatenates the results.
pub fn in_chunks<T>(images: &[ImageSlice], mut f: impl FnMut(&Tensor) -> Result<Vec<T>>) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        out.extend(f(&images_to_tensor(chunk)?)?);
    }
    Ok(out)
}

/// Segmentor probabilities per image, flattened row-major.
pub fn soft_masks(s: &SegmentorNet, images: &[ImageSlice]) -> Result<Vec<Vec<f64>>> {
    in_chunks(images, |x| tensor_to_soft(&forward_s(s, x)?))
}

/// Applies an image-to-image network chunk by chunk.
pub fn map_images(images: &[ImageSlice], f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Vec<ImageSlice>> {
    in_chunks(images, |x| tensor_to_images(&f(x)?))
}

fn same_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Validation(format!("{what}: {a} versus {b} items")));
    }
    Ok(())
}

/// Judge pixel counts behind a healthiness value.
#[derive(Clone, Debug, PartialEq)]
pub struct Healthiness {
    pub h: f64,
    /// Pathology pixels found in each synthetic image.
    pub synth_counts: Vec<usize>,
    /// Pathology pixels found in each input image.
    pub input_counts: Vec<usize>,
}

/// `h = 1 - E[N(f(synth))] / E[N(f(input))]`, a ratio of batch means.
pub fn healthiness(synth: &[ImageSlice], inputs: &[ImageSlice], judge: &dyn PathologyJudge) -> Result<Healthiness> {
    same_len("healthiness pairs", synth.len(), inputs.len())?;
    if synth.is_empty() {
        return Err(Error::UndefinedMetric {
            metric: "h",
            reason: "no images".into(),
        });
    }
    let synth_counts: Vec<usize> = judge.segment(synth)?.iter().map(PathologyMask::count).collect();
    let input_counts: Vec<usize> = judge.segment(inputs)?.iter().map(PathologyMask::count).collect();
    let den: usize = input_counts.iter().sum();
    if den == 0 {
        return Err(Error::UndefinedMetric {
            metric: "h",
            reason: "the judge finds no pathology in the inputs".into(),
        });
    }
    let num: usize = synth_counts.iter().sum();
    Ok(Healthiness {
        h: 1.0 - num as f64 / den as f64,
        synth_counts,
        input_counts,
    })
}

/// Masked MS-SSIM between the input and the synthetic image outside `mask`.
pub fn identity(x_p: &ImageSlice, x_tilde_h: &ImageSlice, mask: &PathologyMask) -> Result<f64> {
    if x_p.shape() != mask.shape() {
        return Err(Error::Validation(format!(
            "mask {:?} does not match image {:?}",
            mask.shape(),
            x_p.shape()
        )));
    }
    ms_ssim(&x_tilde_h.outside(mask), &x_p.outside(mask))
}

/// Per-image identity scores.
pub fn identity_scores(x_p: &[ImageSlice], x_tilde_h: &[ImageSlice], masks: &[&PathologyMask]) -> Result<Vec<f64>> {
    same_len("identity images", x_p.len(), x_tilde_h.len())?;
    same_len("identity masks", x_p.len(), masks.len())?;
    x_p.iter()
        .zip(x_tilde_h)
        .zip(masks)
        .map(|((a, b), m)| identity(a, b, m))
        .collect()
}

/// Per-image probability of being deformation-free, judged on Canny edges.
pub fn dec_scores(synth: &[ImageSlice], clf: &dyn DeformationJudge) -> Result<Vec<f64>> {
    if !clf.is_trained() {
        return Err(Error::Validation("the deformation classifier has not been trained".into()));
    }
    let edges: Vec<ImageSlice> = synth.iter().map(edge_image).collect();
    clf.prob_undeformed(&edges)
}

/// Mean of [`dec_scores`].
pub fn dec_score(synth: &[ImageSlice], clf: &dyn DeformationJudge) -> Result<f64> {
    let s = dec_scores(synth, clf)?;
    if s.is_empty() {
        return Err(Error::UndefinedMetric {
            metric: "DeC",
            reason: "no images".into(),
        });
    }
    Ok(mean(&s))
}

/// Dice coefficient `1 - dice_loss` of binary masks.
pub fn dice_score(pred: &PathologyMask, target: &PathologyMask) -> f64 {
    let p: Vec<f64> = pred.data().iter().map(|&v| f64::from(v)).collect();
    let t: Vec<f64> = target.data().iter().map(|&v| f64::from(v)).collect();
    1.0 - dice_loss_values(&p, &t)
}

/// Pixels where `|x_p - x_tilde_h| > threshold`.
pub fn diff_map_segmentation(x_p: &ImageSlice, x_tilde_h: &ImageSlice, threshold: f64) -> Result<PathologyMask> {
    if x_p.shape() != x_tilde_h.shape() {
        return Err(Error::Validation(format!(
            "difference map needs equal shapes, got {:?} and {:?}",
            x_p.shape(),
            x_tilde_h.shape()
        )));
    }
    let (h, w) = x_p.shape();
    Ok(PathologyMask::from_fn(h, w, |r, c| {
        (f64::from(x_p.get(r, c)) - f64::from(x_tilde_h.get(r, c))).abs() > threshold
    }))
}

/// Dice of the difference-map segmentation of each pair against ground truth.
pub fn diff_map_dice(x_p: &[ImageSlice], x_tilde_h: &[ImageSlice], truth: &[&PathologyMask]) -> Result<Vec<f64>> {
    same_len("difference-map images", x_p.len(), x_tilde_h.len())?;
    same_len("difference-map masks", x_p.len(), truth.len())?;
    x_p.iter()
        .zip(x_tilde_h)
        .zip(truth)
        .map(|((a, b), t)| Ok(dice_score(&diff_map_segmentation(a, b, DIFF_THRESHOLD)?, t)))
        .collect()
}

/// Per-image Dice of the thresholded Segmentor output.
pub fn segmentor_dice(judge: &dyn PathologyJudge, images: &[ImageSlice], truth: &[&PathologyMask]) -> Result<Vec<f64>> {
    same_len("segmentor Dice", images.len(), truth.len())?;
    Ok(judge
        .segment(images)?
        .iter()
        .zip(truth)
        .map(|(p, t)| dice_score(p, t))
        .collect())
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (`n - 1` denominator); 0 for fewer than two values.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}
