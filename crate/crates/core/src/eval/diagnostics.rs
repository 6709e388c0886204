//! Diagnostic experiments on trained models: the mask-shift test of mask
//! conditioning, pseudo-disease synthesis, repeated generator passes and the
//! information-hiding comparison.

use pseudoheal_autograd::Tensor;

use super::metrics::{healthiness, identity_scores, map_images, mean, soft_masks, PathologyJudge, JUDGE_THRESHOLD};
use crate::image::{images_to_tensor, masks_to_tensor, ImageSlice, PathologyMask};
use crate::nets::{forward_g, forward_r, forward_s, GeneratorNet, ReconstructorNet, SegmentorNet};
use crate::train::{Baseline, ModelBundle};
use crate::{Error, Result};

/// Distance the predicted mask is moved in the mask-shift test.
pub const MASK_SHIFT: f64 = 8.0;

/// Integer offset of length about `distance` pointing from the mask centroid
/// to the image centre (to the right when they coincide).
pub fn shift_toward_center(mask: &PathologyMask, distance: f64) -> (isize, isize) {
    let (h, w) = mask.shape();
    let centre = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (cr, cc) = mask.centroid().unwrap_or(centre);
    let (dr, dc) = (centre.0 - cr, centre.1 - cc);
    let norm = (dr * dr + dc * dc).sqrt();
    if norm < 1e-9 {
        return (0, distance.round() as isize);
    }
    (
        (dr / norm * distance).round() as isize,
        (dc / norm * distance).round() as isize,
    )
}

/// One slice of the mask-shift test.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskShiftCase {
    pub offset: (isize, isize),
    /// IoU of the re-segmentation with the shifted mask.
    pub iou_shifted: f64,
    /// IoU of the re-segmentation with the original mask.
    pub iou_original: f64,
}

impl MaskShiftCase {
    pub fn passed(&self) -> bool {
        self.iou_shifted > self.iou_original
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskShiftReport {
    pub cases: Vec<MaskShiftCase>,
}

impl MaskShiftReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.cases.is_empty() {
            return 0.0;
        }
        self.cases.iter().filter(|c| c.passed()).count() as f64 / self.cases.len() as f64
    }
}

/// For each input: `m = S(x_p) > 0.5` is moved by `distance` pixels towards
/// the centre, `R(G(x_p), shifted m)` is re-segmented and compared with both
/// masks. A model that honours its mask input moves the lesion with it.
pub fn mask_shift_test(bundle: &ModelBundle, x_p: &[ImageSlice], distance: f64) -> Result<MaskShiftReport> {
    let s = bundle.segmentor()?;
    let r = bundle.reconstructor()?;
    let x_tilde = map_images(x_p, |x| forward_g(&bundle.g, x))?;
    let predicted = binarise(s, x_p)?;
    let mut shifted = Vec::with_capacity(x_p.len());
    let mut offsets = Vec::with_capacity(x_p.len());
    for m in &predicted {
        let off = shift_toward_center(m, distance);
        shifted.push(m.shifted(off.0, off.1));
        offsets.push(off);
    }
    let mut moved = Vec::with_capacity(x_p.len());
    for (imgs, masks) in x_tilde.chunks(super::metrics::EVAL_CHUNK).zip(shifted.chunks(super::metrics::EVAL_CHUNK)) {
        let out = forward_r(r, &images_to_tensor(imgs)?, &masks_to_tensor(masks)?)?;
        moved.extend(crate::image::tensor_to_images(&out)?);
    }
    let reseg = binarise(s, &moved)?;
    let cases = reseg
        .iter()
        .zip(&shifted)
        .zip(&predicted)
        .zip(offsets)
        .map(|(((seg, sh), orig), offset)| MaskShiftCase {
            offset,
            iou_shifted: seg.iou(sh),
            iou_original: seg.iou(orig),
        })
        .collect();
    Ok(MaskShiftReport { cases })
}

fn binarise(s: &SegmentorNet, images: &[ImageSlice]) -> Result<Vec<PathologyMask>> {
    Ok(soft_masks(s, images)?
        .iter()
        .zip(images)
        .map(|(soft, i)| PathologyMask::from_soft(i.height(), i.width(), soft, JUDGE_THRESHOLD))
        .collect())
}

/// `R(x_h, m)`: a synthetic pathological image with a lesion where `m` says.
pub fn pseudo_disease(r: &ReconstructorNet, x_h: &ImageSlice, m: &PathologyMask) -> Result<ImageSlice> {
    let out = forward_r(r, &images_to_tensor([x_h])?, &masks_to_tensor([m])?)?;
    Ok(crate::image::tensor_to_images(&out)?.remove(0))
}

/// [`pseudo_disease`] plus the IoU of its re-segmentation with `m`.
pub fn pseudo_disease_iou(
    r: &ReconstructorNet,
    s: &SegmentorNet,
    x_h: &ImageSlice,
    m: &PathologyMask,
) -> Result<(ImageSlice, f64)> {
    let img = pseudo_disease(r, x_h, m)?;
    let seg = binarise(s, std::slice::from_ref(&img))?.remove(0);
    Ok((img, seg.iou(m)))
}

/// Metrics after each of `k` repeated generator passes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationMetrics {
    pub pass: usize,
    pub identity: f64,
    pub healthiness: f64,
}

/// Applies `G` `k` times, scoring each pass against the original inputs.
pub fn iterate_generator(
    g: &GeneratorNet,
    x_p: &[ImageSlice],
    masks: &[&PathologyMask],
    judge: &dyn PathologyJudge,
    k: usize,
) -> Result<Vec<IterationMetrics>> {
    let mut current = x_p.to_vec();
    let mut out = Vec::with_capacity(k);
    for pass in 1..=k {
        current = map_images(&current, |x| forward_g(g, x))?;
        out.push(IterationMetrics {
            pass,
            identity: mean(&identity_scores(x_p, &current, masks)?),
            healthiness: healthiness(&current, x_p, judge)?.h,
        });
    }
    Ok(out)
}

/// Reconstruction error of `x_p` from its pseudo-healthy image, intact and
/// with the lesion region of the pseudo-healthy image set to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Degradation {
    pub intact: f64,
    pub zeroed: f64,
}

impl Degradation {
    /// Increase of the mean absolute reconstruction error caused by zeroing.
    pub fn delta(&self) -> f64 {
        self.zeroed - self.intact
    }
}

/// Runs `forward` then `reverse(x_tilde, x_p)` on each chunk and compares the
/// reconstructions with and without the lesion region zeroed.
pub fn reconstruction_degradation(
    x_p: &[ImageSlice],
    masks: &[&PathologyMask],
    forward: &dyn Fn(&Tensor) -> Result<Tensor>,
    reverse: &dyn Fn(&Tensor, &Tensor) -> Result<Tensor>,
) -> Result<Degradation> {
    if x_p.len() != masks.len() || x_p.is_empty() {
        return Err(Error::Validation("degradation needs one mask per image and at least one image".into()));
    }
    let (mut intact, mut zeroed, mut n) = (0.0, 0.0, 0usize);
    for (imgs, ms) in x_p.chunks(super::metrics::EVAL_CHUNK).zip(masks.chunks(super::metrics::EVAL_CHUNK)) {
        let x = images_to_tensor(imgs)?;
        let keep = masks_to_tensor(ms.iter().copied())?.map(|v| 1.0 - v);
        let x_tilde = forward(&x)?;
        let x_cut = x_tilde.zip_map(&keep, |a, k| a * k)?;
        let l1 = |rec: &Tensor| rec.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        intact += l1(&reverse(&x_tilde, &x)?);
        zeroed += l1(&reverse(&x_cut, &x)?);
        n += x.numel();
    }
    Ok(Degradation {
        intact: intact / n as f64,
        zeroed: zeroed / n as f64,
    })
}

/// [`reconstruction_degradation`] for a trained model: `R(., S(x_p))` for the
/// proposed method, the reverse generator for CycleGAN.
pub fn information_hiding(bundle: &ModelBundle, x_p: &[ImageSlice], masks: &[&PathologyMask]) -> Result<Degradation> {
    let forward = |x: &Tensor| forward_g(&bundle.g, x);
    match bundle.config.baseline {
        Baseline::None => {
            let s = bundle.segmentor()?;
            let r = bundle.reconstructor()?;
            let reverse = |xt: &Tensor, x: &Tensor| forward_r(r, xt, &forward_s(s, x)?);
            reconstruction_degradation(x_p, masks, &forward, &reverse)
        }
        Baseline::Cyclegan => {
            let f = bundle
                .f
                .as_ref()
                .ok_or_else(|| Error::Validation("CycleGAN model without reverse generator".into()))?;
            let reverse = |xt: &Tensor, _: &Tensor| forward_g(f, xt);
            reconstruction_degradation(x_p, masks, &forward, &reverse)
        }
        Baseline::ConditionalGan => Err(Error::Validation(
            "the conditional GAN has no reverse mapping to test".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_points_at_the_centre() {
        let m = PathologyMask::from_fn(64, 64, |r, c| (5..9).contains(&r) && (30..34).contains(&c));
        let (dr, dc) = shift_toward_center(&m, 8.0);
        assert_eq!((dr, dc), (8, 0));
        let centred = PathologyMask::from_fn(5, 5, |r, c| r == 2 && c == 2);
        assert_eq!(shift_toward_center(&centred, 8.0), (0, 8));
    }

    #[test]
    fn identity_maps_do_not_degrade() {
        let img = ImageSlice::from_fn(16, 16, |r, c| ((r + c) % 5) as f32 / 5.0);
        let m = PathologyMask::from_fn(16, 16, |r, c| r < 4 && c < 4);
        let id = |x: &Tensor| Ok(x.clone());
        let rev = |_: &Tensor, x: &Tensor| Ok(x.clone());
        let d = reconstruction_degradation(&[img.clone()], &[&m], &id, &rev).unwrap();
        assert_eq!(d.delta(), 0.0);
        // A reverse map that copies its input loses exactly the zeroed pixels.
        let copy = |xt: &Tensor, _: &Tensor| Ok(xt.clone());
        let d = reconstruction_degradation(&[img.clone()], &[&m], &id, &copy).unwrap();
        let lost: f64 = (0..4).flat_map(|r| (0..4).map(move |c| (r, c))).map(|(r, c)| f64::from(img.get(r, c))).sum();
        assert!((d.delta() - lost / 256.0).abs() < 1e-6);
    }
}
