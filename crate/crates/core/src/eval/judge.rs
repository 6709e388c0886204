//! Independently trained evaluation networks: the judge segmentor behind
//! healthiness and the edge-map deformation classifier behind DeC.

use std::rc::Rc;

use pseudoheal_autograd::{sigmoid, Adam, AdamConfig, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::canny::edge_image;
use super::metrics::{in_chunks, mean, segmentor_dice, DeformationJudge, PathologyJudge};
use crate::image::{images_to_tensor, masks_to_tensor, ImageSlice, PathologyMask};
use crate::losses::dice_loss;
use crate::nets::{forward_critic, Critic, CriticNet, Module, NetConfig, SegmentorNet};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeConfig {
    pub net: NetConfig,
    /// Epochs on the training split.
    pub epochs: usize,
    /// Further epochs on the validation split.
    pub fine_tune_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            net: NetConfig {
                base_channels: 8,
                critic_channels: 8,
                ..NetConfig::default()
            },
            epochs: 15,
            fine_tune_epochs: 3,
            batch_size: 8,
            lr: 5e-4,
            seed: 17,
        }
    }
}

impl JudgeConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("judge", "epochs and batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("judge.lr", "must be finite and > 0"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// One labelled slice; healthy slices carry an empty mask.
pub type Labelled<'a> = (&'a ImageSlice, &'a PathologyMask);

/// Segmentor trained on ground-truth masks, used only for evaluation.
#[derive(Clone, Debug)]
pub struct JudgeSegmentor {
    pub net: SegmentorNet,
}

impl PathologyJudge for JudgeSegmentor {
    fn segment(&self, images: &[ImageSlice]) -> Result<Vec<PathologyMask>> {
        self.net.segment(images)
    }
}

impl JudgeSegmentor {
    /// Trains on `train`, then fine-tunes on `val`, with a per-sample Dice
    /// term on slices with lesions plus a pixelwise squared error on all.
    pub fn train(train: &[Labelled<'_>], val: &[Labelled<'_>], cfg: &JudgeConfig) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Validation("the judge needs training slices".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut net = SegmentorNet::new(&cfg.net, &mut rng);
        let mut adam = Adam::new(cfg.adam(), net.params());
        for (set, epochs) in [(train, cfg.epochs), (val, cfg.fine_tune_epochs)] {
            for _ in 0..epochs {
                let mut order: Vec<usize> = (0..set.len()).collect();
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.batch_size) {
                    let x = images_to_tensor(chunk.iter().map(|&i| set[i].0))?;
                    let m = masks_to_tensor(chunk.iter().map(|&i| set[i].1))?;
                    let with_lesion: Vec<usize> = (0..chunk.len()).filter(|&k| !set[chunk[k]].1.is_empty()).collect();
                    let mut g = Graph::new();
                    let p = g.bind(net.params());
                    let xv = g.constant(x);
                    let pred = net.forward(&mut g, &p, xv)?;
                    let target = g.constant(m);
                    let diff = g.sub(pred, target)?;
                    let sq = g.square(diff);
                    let mut loss = g.mean(sq);
                    if !with_lesion.is_empty() {
                        let ps = g.select_batch(pred, &with_lesion)?;
                        let ts = g.select_batch(target, &with_lesion)?;
                        let d = dice_loss(&mut g, ps, ts)?;
                        loss = g.add(loss, d)?;
                    }
                    let grads = g.backward(loss)?.for_params(&p, net.params());
                    adam.step(net.params_mut(), &grads);
                }
            }
        }
        Ok(Self { net })
    }

    /// Mean per-image Dice on slices with lesions.
    pub fn dice(&self, set: &[Labelled<'_>]) -> Result<f64> {
        let sick: Vec<&Labelled<'_>> = set.iter().filter(|(_, m)| !m.is_empty()).collect();
        if sick.is_empty() {
            return Err(Error::UndefinedMetric {
                metric: "judge Dice",
                reason: "no slices with lesions".into(),
            });
        }
        let images: Vec<ImageSlice> = sick.iter().map(|(i, _)| (*i).clone()).collect();
        let masks: Vec<&PathologyMask> = sick.iter().map(|(_, m)| *m).collect();
        Ok(mean(&segmentor_dice(self, &images, &masks)?))
    }
}

/// Binary classifier on Canny edge maps: deformed (0) versus deformation-free (1).
#[derive(Clone, Debug)]
pub struct DecClassifier {
    pub net: CriticNet,
    trained: bool,
}

impl DecClassifier {
    /// A classifier with random weights; [`dec_score`](super::metrics::dec_score) refuses it.
    pub fn untrained(cfg: &NetConfig, input_hw: (usize, usize), seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            net: CriticNet::new("DeC", cfg, input_hw, &mut rng)?,
            trained: false,
        })
    }

    /// Trains on `(image, deformed)` pairs of healthy slices, then fine-tunes on `val`.
    pub fn train(train: &[(&ImageSlice, bool)], val: &[(&ImageSlice, bool)], cfg: &JudgeConfig) -> Result<Self> {
        cfg.validate()?;
        let first = train
            .first()
            .ok_or_else(|| Error::Validation("the deformation classifier needs training slices".into()))?;
        if train.iter().all(|(_, d)| *d) || train.iter().all(|(_, d)| !*d) {
            return Err(Error::Validation(
                "the deformation classifier needs both deformed and undeformed slices".into(),
            ));
        }
        let mut clf = Self::untrained(&cfg.net, first.0.shape(), cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 1);
        let mut adam = Adam::new(cfg.adam(), clf.net.params());
        for (set, epochs) in [(train, cfg.epochs), (val, cfg.fine_tune_epochs)] {
            let edges: Vec<ImageSlice> = set.iter().map(|(i, _)| edge_image(i)).collect();
            for _ in 0..epochs {
                let mut order: Vec<usize> = (0..set.len()).collect();
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.batch_size) {
                    let x = images_to_tensor(chunk.iter().map(|&i| &edges[i]))?;
                    let labels: Vec<f64> = chunk.iter().map(|&i| if set[i].1 { 0.0 } else { 1.0 }).collect();
                    let targets = Rc::new(Tensor::new([chunk.len(), 1], labels)?);
                    let mut g = Graph::new();
                    let p = g.bind(clf.net.params());
                    let xv = g.constant(x);
                    let logits = clf.net.score(&mut g, &p, xv)?;
                    let loss = g.bce_with_logits(logits, targets)?;
                    let grads = g.backward(loss)?.for_params(&p, clf.net.params());
                    adam.step(clf.net.params_mut(), &grads);
                }
            }
        }
        clf.trained = true;
        Ok(clf)
    }

    /// Fraction of `(image, deformed)` pairs classified correctly at 0.5.
    pub fn accuracy(&self, set: &[(&ImageSlice, bool)]) -> Result<f64> {
        if set.is_empty() {
            return Err(Error::UndefinedMetric {
                metric: "DeC accuracy",
                reason: "no slices".into(),
            });
        }
        let edges: Vec<ImageSlice> = set.iter().map(|(i, _)| edge_image(i)).collect();
        let probs = self.prob_undeformed(&edges)?;
        let correct = probs.iter().zip(set).filter(|(p, (_, d))| (**p > 0.5) != *d).count();
        Ok(correct as f64 / set.len() as f64)
    }
}

impl DeformationJudge for DecClassifier {
    fn is_trained(&self) -> bool {
        self.trained
    }

    fn prob_undeformed(&self, edge_maps: &[ImageSlice]) -> Result<Vec<f64>> {
        in_chunks(edge_maps, |x| {
            Ok(forward_critic(&self.net, x)?.data().iter().map(|&z| sigmoid(z)).collect())
        })
    }
}
