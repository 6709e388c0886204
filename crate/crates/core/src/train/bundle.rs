//! Trained model state and the checkpoint archive.
//!
//! Archive layout: the 8-byte magic `PHCKPT01`, a little-endian `u64` header
//! length, a JSON header (configuration, counters and a tensor index) and a
//! payload of little-endian `f64` values in index order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use pseudoheal_autograd::{Adam, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Ablation, Baseline, TrainConfig};
use crate::nets::{CriticNet, GeneratorNet, Module, ReconstructorNet, SegmentorNet};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"PHCKPT01";

/// Network slots, in archive order.
pub const NET_NAMES: [&str; 7] = ["G", "S", "R", "F", "D_x", "D_m", "D_p"];

/// Parameters of every network of one trained model plus its progress.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: TrainConfig,
    pub input_hw: (usize, usize),
    /// Generator updates taken so far.
    pub step: u64,
    /// Epochs completed so far.
    pub epoch: usize,
    pub g: GeneratorNet,
    pub s: Option<SegmentorNet>,
    pub r: Option<ReconstructorNet>,
    /// Reverse generator of the CycleGAN baseline.
    pub f: Option<GeneratorNet>,
    /// Healthy-image critic.
    pub d_x: CriticNet,
    /// Mask critic; present only when some training slices lack masks.
    pub d_m: Option<CriticNet>,
    /// Pathological-image critic of the CycleGAN baseline and the Cycle H-P ablation.
    pub d_p: Option<CriticNet>,
}

impl ModelBundle {
    /// Fresh networks for `config`. `mask_critic` requests `D_m`.
    pub fn init(config: &TrainConfig, input_hw: (usize, usize), mask_critic: bool) -> Result<Self> {
        config.validate()?;
        let net = &config.net;
        let rng = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(config.seed);
            r.set_stream(1000 + k);
            r
        };
        let proposed = config.baseline == Baseline::None;
        Ok(Self {
            config: config.clone(),
            input_hw,
            step: 0,
            epoch: 0,
            g: GeneratorNet::new(net, &mut rng(0)),
            s: proposed.then(|| SegmentorNet::new(net, &mut rng(1))),
            r: proposed.then(|| ReconstructorNet::new(net, &mut rng(2))),
            f: (config.baseline == Baseline::Cyclegan).then(|| GeneratorNet::new(net, &mut rng(3))),
            d_x: CriticNet::new("D_x", net, input_hw, &mut rng(4))?,
            d_m: if proposed && mask_critic {
                Some(CriticNet::new("D_m", net, input_hw, &mut rng(5))?)
            } else {
                None
            },
            d_p: if config.baseline == Baseline::Cyclegan || (proposed && config.ablation == Ablation::CycleHp) {
                Some(CriticNet::new("D_p", net, input_hw, &mut rng(6))?)
            } else {
                None
            },
        })
    }

    /// `(name, params)` of every present network, in archive order.
    pub fn networks(&self) -> Vec<(&'static str, &ParamStore)> {
        let mut out: Vec<(&'static str, &ParamStore)> = vec![("G", self.g.params())];
        if let Some(s) = &self.s {
            out.push(("S", s.params()));
        }
        if let Some(r) = &self.r {
            out.push(("R", r.params()));
        }
        if let Some(f) = &self.f {
            out.push(("F", f.params()));
        }
        out.push(("D_x", self.d_x.params()));
        if let Some(d) = &self.d_m {
            out.push(("D_m", d.params()));
        }
        if let Some(d) = &self.d_p {
            out.push(("D_p", d.params()));
        }
        out
    }

    fn network_mut(&mut self, name: &str) -> Option<&mut ParamStore> {
        match name {
            "G" => Some(self.g.params_mut()),
            "S" => self.s.as_mut().map(|n| n.params_mut()),
            "R" => self.r.as_mut().map(|n| n.params_mut()),
            "F" => self.f.as_mut().map(|n| n.params_mut()),
            "D_x" => Some(self.d_x.params_mut()),
            "D_m" => self.d_m.as_mut().map(|n| n.params_mut()),
            "D_p" => self.d_p.as_mut().map(|n| n.params_mut()),
            _ => None,
        }
    }

    pub fn segmentor(&self) -> Result<&SegmentorNet> {
        self.s
            .as_ref()
            .ok_or_else(|| Error::Validation("this model has no Segmentor".into()))
    }

    pub fn reconstructor(&self) -> Result<&ReconstructorNet> {
        self.r
            .as_ref()
            .ok_or_else(|| Error::Validation("this model has no Reconstructor".into()))
    }
}

/// Adam state of every network being trained, keyed by network name.
pub type Optimizers = BTreeMap<String, Adam>;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    input_hw: (usize, usize),
    step: u64,
    epoch: usize,
    networks: Vec<String>,
    optimizer_steps: BTreeMap<String, u64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Writes a checkpoint archive; optimiser state is included when given.
pub fn save_checkpoint(path: &Path, bundle: &ModelBundle, optimizers: Option<&Optimizers>) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, t: &Tensor| {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    let networks = bundle.networks();
    for (net, store) in &networks {
        for (name, t) in store.iter() {
            push(format!("{net}/{name}"), t);
        }
    }
    let mut optimizer_steps = BTreeMap::new();
    if let Some(opts) = optimizers {
        for (net, adam) in opts {
            let store = networks
                .iter()
                .find(|(n, _)| n == net)
                .map(|(_, s)| *s)
                .ok_or_else(|| Error::Validation(format!("optimiser for missing network {net}")))?;
            let (m, v) = adam.moments();
            for ((name, _), (mt, vt)) in store.iter().zip(m.iter().zip(v)) {
                push(format!("adam/{net}/m/{name}"), mt);
                push(format!("adam/{net}/v/{name}"), vt);
            }
            optimizer_steps.insert(net.clone(), adam.steps());
        }
    }
    let header = Header {
        config: bundle.config.clone(),
        input_hw: bundle.input_hw,
        step: bundle.step,
        epoch: bundle.epoch,
        networks: networks.iter().map(|(n, _)| n.to_string()).collect(),
        optimizer_steps,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write to a sibling file first so an interrupted run never leaves a torn archive.
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let write = |file: &mut fs::File, bytes: &[u8]| file.write_all(bytes).map_err(|e| Error::io(&tmp, e));
    write(&mut file, MAGIC)?;
    write(&mut file, &(json.len() as u64).to_le_bytes())?;
    write(&mut file, &json)?;
    write(&mut file, &payload)?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint archive written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle, Optimizers)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |detail: String| Error::corrupt("checkpoint", path, detail);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing archive magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + header_len)
        .ok_or_else(|| corrupt(format!("header of {header_len} bytes is truncated")))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| corrupt(format!("bad header: {e}")))?;
    let payload = &bytes[16 + header_len..];
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != total * 8 {
        return Err(corrupt(format!(
            "payload holds {} bytes, index needs {}",
            payload.len(),
            total * 8
        )));
    }
    let mut tensors: BTreeMap<&str, Tensor> = BTreeMap::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset * 8;
        let data = payload
            .get(start..start + n * 8)
            .ok_or_else(|| corrupt(format!("tensor {} lies outside the payload", e.name)))?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.insert(&e.name, Tensor::new(e.shape.clone(), data)?);
    }

    let has = |n: &str| header.networks.iter().any(|x| x == n);
    let mut bundle = ModelBundle::init(&header.config, header.input_hw, has("D_m"))?;
    bundle.step = header.step;
    bundle.epoch = header.epoch;
    let expected: Vec<&str> = bundle.networks().iter().map(|(n, _)| *n).collect();
    if expected != header.networks {
        return Err(corrupt(format!(
            "networks {:?} do not match the configuration ({expected:?})",
            header.networks
        )));
    }
    for net in &header.networks {
        let prefix = format!("{net}/");
        let named: Vec<(&str, &Tensor)> = tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(prefix.as_str()).map(|n| (n, t)))
            .collect();
        let store = bundle.network_mut(net).expect("network listed by the bundle");
        store.load(named).map_err(|e| corrupt(format!("network {net}: {e}")))?;
    }

    let mut optimizers = Optimizers::new();
    for (net, &steps) in &header.optimizer_steps {
        let store = bundle
            .networks()
            .into_iter()
            .find(|(n, _)| n == net)
            .map(|(_, s)| s)
            .ok_or_else(|| corrupt(format!("optimiser state for unknown network {net}")))?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, _) in store.iter() {
            let get = |kind: &str| {
                tensors
                    .get(format!("adam/{net}/{kind}/{name}").as_str())
                    .cloned()
                    .ok_or_else(|| corrupt(format!("missing optimiser moment {kind} for {net}/{name}")))
            };
            m.push(get("m")?);
            v.push(get("v")?);
        }
        let adam = Adam::from_state(bundle.config.optimizer.into(), store, steps, m, v)?;
        optimizers.insert(net.clone(), adam);
    }
    Ok((bundle, optimizers))
}

/// Hex SHA-256 of a file.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..]))
}
