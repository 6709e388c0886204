//! Blinded rating panels: montages for raters, a score template, and the
//! blinding map that resolves tile positions back to methods.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Criterion;
use crate::image::{ImageSlice, PathologyMask};
use crate::{Error, Result};

/// Pixels between montage tiles.
const TILE_GAP: u32 = 2;
/// Grey level of the montage background and gaps.
const GAP_LEVEL: u8 = 128;

/// Synthetic images of one method, one per panel input.
#[derive(Clone, Debug)]
pub struct MethodImages {
    pub method_id: String,
    pub images: Vec<ImageSlice>,
}

/// One panel as shown to raters: the method behind each tile is not stored.
#[derive(Clone, Debug)]
pub struct Panel {
    pub panel_id: usize,
    pub input: ImageSlice,
    pub mask: PathologyMask,
    /// Synthetic images in shuffled order; rater positions start at 0.
    pub tiles: Vec<ImageSlice>,
}

/// Which method produced the tile at `position` of `panel_id`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlindingEntry {
    pub panel_id: usize,
    pub position: usize,
    pub method_id: String,
}

/// Lookup from `(panel_id, position)` to the hidden method.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlindingMap {
    entries: BTreeMap<(usize, usize), String>,
}

impl BlindingMap {
    pub fn from_entries(entries: impl IntoIterator<Item = BlindingEntry>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for e in entries {
            if map.insert((e.panel_id, e.position), e.method_id).is_some() {
                return Err(Error::Validation(format!(
                    "blinding map lists panel {} position {} twice",
                    e.panel_id, e.position
                )));
            }
        }
        Ok(Self { entries: map })
    }

    pub fn method(&self, panel_id: usize, position: usize) -> Option<&str> {
        self.entries.get(&(panel_id, position)).map(String::as_str)
    }

    pub fn has_panel(&self, panel_id: usize) -> bool {
        self.entries.range((panel_id, 0)..=(panel_id, usize::MAX)).next().is_some()
    }

    pub fn entries(&self) -> Vec<BlindingEntry> {
        self.entries
            .iter()
            .map(|(&(panel_id, position), m)| BlindingEntry {
                panel_id,
                position,
                method_id: m.clone(),
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One panel per input, each with an independently shuffled method order.
pub fn build_panels(
    methods: &[MethodImages],
    inputs: &[ImageSlice],
    masks: &[&PathologyMask],
    seed: u64,
) -> Result<(Vec<Panel>, BlindingMap)> {
    if methods.is_empty() {
        return Err(Error::Validation("panels need at least one method".into()));
    }
    if inputs.len() != masks.len() {
        return Err(Error::Validation(format!(
            "{} inputs but {} masks",
            inputs.len(),
            masks.len()
        )));
    }
    for m in methods {
        if m.images.len() != inputs.len() {
            return Err(Error::Validation(format!(
                "method `{}` has {} images for {} inputs",
                m.method_id,
                m.images.len(),
                inputs.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut panels = Vec::with_capacity(inputs.len());
    let mut blinding = Vec::with_capacity(inputs.len() * methods.len());
    for (i, (input, mask)) in inputs.iter().zip(masks).enumerate() {
        let order = permutation(methods.len(), &mut rng);
        let tiles = order.iter().map(|&k| methods[k].images[i].clone()).collect();
        for (position, &k) in order.iter().enumerate() {
            blinding.push(BlindingEntry {
                panel_id: i,
                position,
                method_id: methods[k].method_id.clone(),
            });
        }
        panels.push(Panel {
            panel_id: i,
            input: input.clone(),
            mask: (*mask).clone(),
            tiles,
        });
    }
    Ok((panels, BlindingMap::from_entries(blinding)?))
}

/// A uniformly random ordering of `0..n`.
pub fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn to_level(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Tiles side by side: input, ground-truth mask, then the synthetic images.
pub fn render_montage(panel: &Panel) -> GrayImage {
    let (h, w) = panel.input.shape();
    let n = 2 + panel.tiles.len() as u32;
    let (h32, w32) = (h as u32, w as u32);
    let mut img = GrayImage::from_pixel(n * w32 + (n - 1) * TILE_GAP, h32, Luma([GAP_LEVEL]));
    let mask_tile = ImageSlice::from_fn(h, w, |r, c| if panel.mask.get(r, c) { 1.0 } else { 0.0 });
    let tiles = [&panel.input, &mask_tile].into_iter().chain(&panel.tiles);
    for (t, tile) in tiles.enumerate() {
        let x0 = t as u32 * (w32 + TILE_GAP);
        for r in 0..h {
            for c in 0..w {
                img.put_pixel(x0 + c as u32, r as u32, Luma([to_level(tile.get(r, c))]));
            }
        }
    }
    img
}

/// A blank score row for raters to fill in.
#[derive(Serialize)]
struct TemplateRow {
    rater_id: &'static str,
    panel_id: usize,
    position: usize,
    criterion: Criterion,
    score: &'static str,
}

pub const SCORES_TEMPLATE: &str = "scores_template.csv";

/// Panel file name for `panel_id`.
pub fn panel_file(panel_id: usize) -> String {
    format!("panel_{panel_id:04}.png")
}

/// Writes montages and `scores_template.csv` into `panel_dir` and the
/// blinding map to `blinding_path`, which must lie outside `panel_dir`.
pub fn write_panels(panels: &[Panel], blinding: &BlindingMap, panel_dir: &Path, blinding_path: &Path) -> Result<()> {
    fs::create_dir_all(panel_dir).map_err(|e| Error::io(panel_dir, e))?;
    let blind_dir = parent_dir(blinding_path);
    fs::create_dir_all(&blind_dir).map_err(|e| Error::io(&blind_dir, e))?;
    let panel_abs = panel_dir.canonicalize().map_err(|e| Error::io(panel_dir, e))?;
    let blind_abs = blind_dir.canonicalize().map_err(|e| Error::io(&blind_dir, e))?;
    if blind_abs.starts_with(&panel_abs) {
        return Err(Error::Validation(format!(
            "the blinding map must live outside the panel directory {}",
            panel_dir.display()
        )));
    }
    for p in panels {
        let path = panel_dir.join(panel_file(p.panel_id));
        render_montage(p).save(&path)?;
    }
    let template = panel_dir.join(SCORES_TEMPLATE);
    let mut w = csv::Writer::from_path(&template)?;
    for p in panels {
        for position in 0..p.tiles.len() {
            for criterion in Criterion::ALL {
                w.serialize(TemplateRow {
                    rater_id: "",
                    panel_id: p.panel_id,
                    position,
                    criterion,
                    score: "",
                })?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&template, e))?;
    write_blinding_map(blinding_path, blinding)
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn write_blinding_map(path: &Path, map: &BlindingMap) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in map.entries() {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_blinding_map(path: &Path) -> Result<BlindingMap> {
    let mut r = csv::Reader::from_path(path)?;
    let entries = r.deserialize().collect::<std::result::Result<Vec<BlindingEntry>, _>>()?;
    BlindingMap::from_entries(entries)
}
