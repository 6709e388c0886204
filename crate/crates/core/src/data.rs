//! Dataset containers, preprocessing, subject-level splits, histogram checks
//! and the on-disk corpus format.
//!
//! A corpus directory holds `manifest.json` plus one raw little-endian `f32`
//! image file and one `u8` mask file per sample, row-major and headerless.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::{ImageSlice, Label, PathologyMask};
use crate::phantom::{generate_phantom, PhantomSample, PhantomSpec};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "pseudoheal-dataset";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    HealthyPool,
    PathologicalPool,
}

/// One pool of slices from a single split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<PhantomSample>,
    pub domain: DomainTag,
    pub split: Split,
}

impl Dataset {
    /// Checks that every sample matches the pool's domain.
    pub fn new(samples: Vec<PhantomSample>, domain: DomainTag, split: Split) -> Result<Self> {
        let want = match domain {
            DomainTag::HealthyPool => Label::Healthy,
            DomainTag::PathologicalPool => Label::Pathological,
        };
        if let Some(bad) = samples.iter().find(|s| s.label != want) {
            return Err(Error::Validation(format!(
                "subject {} is {:?} but the pool is {:?}",
                bad.subject_id, bad.label, domain
            )));
        }
        Ok(Self { samples, domain, split })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subjects(&self) -> BTreeSet<u64> {
        self.samples.iter().map(|s| s.subject_id).collect()
    }

    pub fn images(&self) -> Vec<&ImageSlice> {
        self.samples.iter().map(|s| &s.image).collect()
    }

    pub fn masks(&self) -> Vec<&PathologyMask> {
        self.samples.iter().map(|s| &s.mask).collect()
    }
}

/// Real pathology masks of other subjects, used as the real side of the
/// mask game.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskPool {
    pub masks: Vec<PathologyMask>,
    /// Subject of each mask.
    pub subjects: Vec<u64>,
}

impl MaskPool {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: u64,
    pub split: Split,
    pub sample: PhantomSample,
}

/// Every sample of a prepared dataset, across all splits.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub records: Vec<Record>,
}

impl Corpus {
    /// Undeformed slices of one label and split. Deformed healthy slices only
    /// serve the deformation classifier and are kept out of training pools.
    pub fn pool(&self, domain: DomainTag, split: Split) -> Result<Dataset> {
        let label = match domain {
            DomainTag::HealthyPool => Label::Healthy,
            DomainTag::PathologicalPool => Label::Pathological,
        };
        let samples = self
            .records
            .iter()
            .filter(|r| r.split == split && r.sample.label == label)
            .filter(|r| label == Label::Pathological || !r.sample.deformed)
            .map(|r| r.sample.clone())
            .collect();
        Dataset::new(samples, domain, split)
    }

    /// Healthy slices of a split with their deformation flag.
    pub fn healthy_with_deformation(&self, split: Split) -> Vec<(&ImageSlice, bool)> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.sample.label == Label::Healthy)
            .map(|r| (&r.sample.image, r.sample.deformed))
            .collect()
    }

    /// Pathological masks from `split` whose subjects are not in `exclude`.
    pub fn mask_pool(&self, split: Split, exclude: &BTreeSet<u64>) -> MaskPool {
        let (subjects, masks) = self
            .records
            .iter()
            .filter(|r| r.split == split && r.sample.label == Label::Pathological)
            .filter(|r| !exclude.contains(&r.sample.subject_id))
            .map(|r| (r.sample.subject_id, r.sample.mask.clone()))
            .unzip();
        MaskPool { masks, subjects }
    }

    /// Fails when a subject appears in more than one split.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen: HashMap<u64, Split> = HashMap::new();
        for r in &self.records {
            if let Some(prev) = seen.insert(r.sample.subject_id, r.split) {
                if prev != r.split {
                    return Err(Error::Validation(format!(
                        "subject {} appears in both {prev:?} and {:?}",
                        r.sample.subject_id, r.split
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.6, val: 0.15 }
    }
}

/// Shuffles the distinct subject ids under `seed` and cuts them by `fractions`;
/// the remainder is the test split.
pub fn assign_splits(subjects: &[u64], fractions: SplitFractions, seed: u64) -> Result<HashMap<u64, Split>> {
    if fractions.train <= 0.0 || fractions.val < 0.0 || fractions.train + fractions.val >= 1.0 {
        return Err(Error::config(
            "splits",
            "train must be positive and train + val must leave room for a test split",
        ));
    }
    let mut ids: Vec<u64> = subjects.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len() as f64;
    let n_train = (n * fractions.train).round() as usize;
    let n_val = (n * fractions.val).round() as usize;
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(k, id)| {
            let split = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id, split)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub phantom: PhantomSpec,
    /// Main slices drawn with `phantom`.
    pub count: usize,
    /// Extra deformed healthy slices for the deformation classifier.
    pub deformed_healthy: usize,
    pub splits: SplitFractions,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            phantom: PhantomSpec {
                deform: true,
                deform_lesions_only: true,
                ..PhantomSpec::default()
            },
            count: 400,
            deformed_healthy: 120,
            splits: SplitFractions::default(),
        }
    }
}

/// Builds a phantom corpus: `count` slices drawn with `spec.phantom` plus deformed healthy
/// slices, each its own subject, split by subject.
pub fn build_phantom_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    let mut samples = generate_phantom(&spec.phantom, spec.count)?;
    if spec.deformed_healthy > 0 {
        let extra_spec = PhantomSpec {
            seed: spec.phantom.seed ^ 0x5EED_DEF0_4A11_0001,
            lesion_probability: 0.0,
            deform: true,
            deform_lesions_only: false,
            ..spec.phantom.clone()
        };
        for mut s in generate_phantom(&extra_spec, spec.deformed_healthy)? {
            s.subject_id += spec.count as u64;
            samples.push(s);
        }
    }
    let subjects: Vec<u64> = samples.iter().map(|s| s.subject_id).collect();
    let splits = assign_splits(&subjects, spec.splits, spec.phantom.seed)?;
    let records = samples
        .into_iter()
        .enumerate()
        .map(|(id, sample)| Record {
            id: id as u64,
            split: splits[&sample.subject_id],
            sample,
        })
        .collect();
    Ok(Corpus { records })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub clip_percentile: f64,
    pub slice_window: usize,
    pub crop: (usize, usize),
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            clip_percentile: 0.995,
            slice_window: 60,
            crop: (208, 160),
        }
    }
}

impl PreprocessConfig {
    /// Settings for 64x64 phantom slices.
    pub fn phantom() -> Self {
        Self {
            crop: (64, 64),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_percentile > 0.0 && self.clip_percentile <= 1.0) {
            return Err(Error::config("preprocess.clip_percentile", "must lie in (0, 1]"));
        }
        if self.slice_window == 0 {
            return Err(Error::config("preprocess.slice_window", "must be at least 1"));
        }
        if self.crop.0 == 0 || self.crop.1 == 0 {
            return Err(Error::config("preprocess.crop", "must be nonzero"));
        }
        Ok(())
    }
}

/// A 3D intensity volume stored as `depth` axial slices of `height x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(depth: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != depth * height * width {
            return Err(Error::Validation(format!(
                "volume of {depth}x{height}x{width} needs {} voxels, got {}",
                depth * height * width,
                data.len()
            )));
        }
        Ok(Self {
            depth,
            height,
            width,
            data,
        })
    }
}

/// The order statistic at index `ceil(p * n) - 1` of the sorted values.
pub fn percentile(values: &[f32], p: f64) -> f32 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let idx = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

/// Clips at the configured percentile, rescales to `[0, 1]`, keeps the middle
/// axial slices and centre-crops (zero-padding when the slice is smaller).
pub fn preprocess_volume(volume: &Volume, cfg: &PreprocessConfig) -> Result<Vec<ImageSlice>> {
    cfg.validate()?;
    if volume.data.is_empty() {
        return Err(Error::Validation("empty volume".into()));
    }
    if let Some(v) = volume.data.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Validation(format!("negative or NaN intensity {v}")));
    }
    let v = percentile(&volume.data, cfg.clip_percentile);
    if v <= 0.0 {
        return Err(Error::Validation("degenerate volume: clip intensity is zero".into()));
    }
    let keep = cfg.slice_window.min(volume.depth);
    let first = (volume.depth - keep) / 2;
    let plane = volume.height * volume.width;
    Ok((first..first + keep)
        .map(|z| {
            let data = volume.data[z * plane..(z + 1) * plane]
                .iter()
                .map(|&x| x.min(v) / v)
                .collect();
            let slice = ImageSlice::new(volume.height, volume.width, data).expect("plane size");
            center_crop(&slice, cfg.crop)
        })
        .collect())
}

/// Centre crop to `(h, w)`, zero-padding along any axis that is too short.
pub fn center_crop(slice: &ImageSlice, (h, w): (usize, usize)) -> ImageSlice {
    let (sh, sw) = slice.shape();
    let off = |src: usize, dst: usize| src as isize / 2 - dst as isize / 2;
    let (or, oc) = (off(sh, h), off(sw, w));
    ImageSlice::from_fn(h, w, |r, c| {
        let (y, x) = (r as isize + or, c as isize + oc);
        if y >= 0 && x >= 0 && (y as usize) < sh && (x as usize) < sw {
            slice.get(y as usize, x as usize)
        } else {
            0.0
        }
    })
}

/// Healthy iff every value is zero; values other than 0 and 1 are rejected.
pub fn label_slice(mask_values: &[u8]) -> Result<Label> {
    if let Some(bad) = mask_values.iter().find(|&&v| v > 1) {
        return Err(Error::Validation(format!("mask value {bad} is not binary")));
    }
    Ok(if mask_values.iter().any(|&v| v == 1) {
        Label::Pathological
    } else {
        Label::Healthy
    })
}

/// Counts of values in `bins` uniform bins over `[0, 1]` (1.0 lands in the last bin).
pub fn histogram(values: &[f32], bins: usize) -> Vec<u64> {
    let mut h = vec![0u64; bins];
    for &v in values {
        let k = ((v.clamp(0.0, 1.0) as f64) * bins as f64) as usize;
        h[k.min(bins - 1)] += 1;
    }
    h
}

/// Jensen-Shannon divergence in bits between two histograms, in `[0, 1]`.
pub fn js_divergence(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Validation(format!("bin counts differ: {} vs {}", a.len(), b.len())));
    }
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if !(sa > 0.0 && sb > 0.0) || a.iter().chain(b).any(|&v| v < 0.0) {
        return Err(Error::Validation("histograms need nonnegative counts and positive mass".into()));
    }
    let kl_to_mid = |p: f64, q: f64| if p > 0.0 { p * (2.0 * p / (p + q)).log2() } else { 0.0 };
    let mut js = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (p, q) = (x / sa, y / sb);
        js += 0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p);
    }
    Ok(js.clamp(0.0, 1.0))
}

/// JS divergence between the pooled 64-bin intensity histograms of two slice sets.
pub fn histogram_check<'a>(
    a: impl IntoIterator<Item = &'a ImageSlice>,
    b: impl IntoIterator<Item = &'a ImageSlice>,
) -> Result<f64> {
    let pooled = |set: &mut dyn Iterator<Item = &'a ImageSlice>| {
        let mut h = vec![0.0; 64];
        for img in set {
            for (k, c) in histogram(img.data(), 64).into_iter().enumerate() {
                h[k] += c as f64;
            }
        }
        h
    };
    js_divergence(&pooled(&mut a.into_iter()), &pooled(&mut b.into_iter()))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    sample_count: usize,
    samples: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    id: u64,
    subject_id: u64,
    shape: (usize, usize),
    label: Label,
    deformed: bool,
    split: Split,
    image_file: String,
    mask_file: String,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `corpus` into `dir`, creating it if needed.
pub fn save_dataset(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(corpus.records.len());
    for r in &corpus.records {
        let image_file = format!("img_{:05}.f32", r.id);
        let mask_file = format!("mask_{:05}.u8", r.id);
        let bytes: Vec<u8> = r.sample.image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        write_file(&dir.join(&image_file), &bytes)?;
        write_file(&dir.join(&mask_file), r.sample.mask.data())?;
        entries.push(ManifestEntry {
            id: r.id,
            subject_id: r.sample.subject_id,
            shape: r.sample.image.shape(),
            label: r.sample.label,
            deformed: r.sample.deformed,
            split: r.split,
            image_file,
            mask_file,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        sample_count: entries.len(),
        samples: entries,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    write_file(&path, &json)
}

/// Reads a corpus written by [`save_dataset`], validating every payload.
pub fn load_dataset(dir: &Path) -> Result<Corpus> {
    let path = dir.join(MANIFEST);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| Error::corrupt("manifest", &path, e.to_string()))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::corrupt(
            "manifest",
            &path,
            format!("unsupported format {} v{}", manifest.format, manifest.version),
        ));
    }
    if manifest.sample_count != manifest.samples.len() {
        return Err(Error::corrupt(
            "manifest",
            &path,
            format!(
                "declares {} samples but lists {}",
                manifest.sample_count,
                manifest.samples.len()
            ),
        ));
    }
    let listed: HashSet<&str> = manifest
        .samples
        .iter()
        .flat_map(|e| [e.image_file.as_str(), e.mask_file.as_str()])
        .collect();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let is_payload = name.ends_with(".f32") || name.ends_with(".u8");
        if is_payload && !listed.contains(name.as_str()) {
            return Err(Error::corrupt(
                "dataset",
                dir,
                format!("payload {name} is not listed in the manifest ({} samples declared)", manifest.sample_count),
            ));
        }
    }

    let mut records = Vec::with_capacity(manifest.samples.len());
    for e in manifest.samples {
        let (h, w) = e.shape;
        let image_path = dir.join(&e.image_file);
        let bytes = read_payload(&image_path, h * w * 4, "image")?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let image = ImageSlice::new(h, w, data)?;
        let mask_path = dir.join(&e.mask_file);
        let mask_bytes = read_payload(&mask_path, h * w, "mask")?;
        let mask = PathologyMask::new(h, w, mask_bytes).map_err(|err| Error::corrupt("mask", &mask_path, err.to_string()))?;
        let label = label_slice(mask.data())?;
        if label != e.label {
            return Err(Error::corrupt(
                "manifest",
                &path,
                format!("sample {} is listed as {:?} but its mask says {label:?}", e.id, e.label),
            ));
        }
        records.push(Record {
            id: e.id,
            split: e.split,
            sample: PhantomSample {
                image,
                mask,
                label,
                subject_id: e.subject_id,
                deformed: e.deformed,
            },
        });
    }
    let corpus = Corpus { records };
    corpus.check_disjoint()?;
    Ok(corpus)
}

fn read_payload(path: &PathBuf, expected: usize, what: &'static str) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::corrupt(what, path, "file listed in manifest is missing"),
        _ => Error::io(path, e),
    })?;
    if bytes.len() != expected {
        return Err(Error::corrupt(
            what,
            path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    Ok(bytes)
}
