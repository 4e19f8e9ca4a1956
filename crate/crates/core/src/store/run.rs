//! Run directories: one per (original, target) pair.
//!
//! ```text
//! pair_<o>_<t>/
//!   manifest.json
//!   weights.pfwt
//!   attacked/eps_<ε>/index.json
//!   attacked/eps_<ε>/images.pfwt
//!   traces/*.pfwt        (cache written by extract)
//!   graph.json           (extract, rewritten by explain)
//!   report.json          (extract)
//!   assets/*.png         (explain)
//! ```

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{io_err, read_json, write_atomic, write_json, Result, StoreError};
use crate::attack::{eps_map, AttackResult, Epsilon};
use crate::model::{decode_tensors, encode_tensors, load_weights, ActivationTrace, MiniInception};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub seed: u64,
    pub num_classes: usize,
    pub per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackParams {
    pub steps: usize,
    pub step_factor: f64,
    pub random_start: Option<u64>,
    pub max_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub weights_sha256: String,
    pub dataset: DatasetInfo,
    pub original: usize,
    pub target: usize,
    pub epsilons: Vec<Epsilon>,
    pub attack: AttackParams,
    /// Original-class images attacked at every strength.
    pub attacked_images: Vec<usize>,
    #[serde(with = "eps_map")]
    pub success_counts: BTreeMap<Epsilon, usize>,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

pub fn run_id(original: usize, target: usize) -> String {
    format!("pair_{original}_{target}")
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(io_err(path))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Per-strength attack index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackIndex {
    pub epsilon: Epsilon,
    pub entries: Vec<AttackIndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackIndexEntry {
    pub image_id: usize,
    pub epsilon: Epsilon,
    pub delta_norm: f64,
    pub predicted: usize,
    pub success: bool,
}

fn image_name(id: usize) -> String {
    format!("image_{id}")
}

/// Writes every result of one strength: `index.json` plus the adversarial
/// images in the tensor file format.
pub fn write_attacked_set(dir: &Path, epsilon: Epsilon, results: &[AttackResult]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    if let Some(r) = results.iter().find(|r| r.epsilon != epsilon) {
        return Err(StoreError::Layout(format!(
            "result for image {} has strength {}, expected {epsilon}",
            r.image_id, r.epsilon
        )));
    }
    let index = AttackIndex {
        epsilon,
        entries: results
            .iter()
            .map(|r| AttackIndexEntry {
                image_id: r.image_id,
                epsilon,
                delta_norm: r.delta_norm,
                predicted: r.predicted,
                success: r.success,
            })
            .collect(),
    };
    let names: Vec<String> = results.iter().map(|r| image_name(r.image_id)).collect();
    let bytes = encode_tensors(names.iter().map(String::as_str).zip(results.iter().map(|r| &r.adversarial)))?;
    write_atomic(&dir.join("images.pfwt"), &bytes)?;
    write_json(&dir.join("index.json"), &index)
}

/// Reads one strength's results back. `delta_norm` is taken from the index
/// and therefore carries its 6-decimal rounding.
pub fn read_attacked_set(dir: &Path) -> Result<Vec<AttackResult>> {
    let index: AttackIndex = read_json(&dir.join("index.json"))?;
    let path = dir.join("images.pfwt");
    let bytes = std::fs::read(&path).map_err(io_err(&path))?;
    let mut images: BTreeMap<String, Tensor> = decode_tensors(&bytes)?.into_iter().collect();
    index
        .entries
        .into_iter()
        .map(|e| {
            let adversarial = images
                .remove(&image_name(e.image_id))
                .ok_or_else(|| StoreError::Layout(format!("{}: no image for id {}", path.display(), e.image_id)))?;
            Ok(AttackResult {
                image_id: e.image_id,
                epsilon: e.epsilon,
                adversarial,
                delta_norm: e.delta_norm,
                predicted: e.predicted,
                success: e.success,
            })
        })
        .collect()
}

/// Stores traces keyed by image id.
pub fn save_traces(path: &Path, traces: &[(usize, ActivationTrace)]) -> Result<()> {
    let mut named: Vec<(String, &Tensor)> = Vec::new();
    for (id, t) in traces {
        for (q, m) in t.mixed.iter().enumerate() {
            named.push((format!("{id}/mixed{q}"), m));
        }
        named.push((format!("{id}/logits"), &t.logits));
    }
    let bytes = encode_tensors(named.iter().map(|(n, t)| (n.as_str(), *t)))?;
    write_atomic(path, &bytes)
}

pub fn load_traces(path: &Path) -> Result<Vec<(usize, ActivationTrace)>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let bad = |name: &str| StoreError::Layout(format!("{}: unexpected tensor {name:?}", path.display()));
    let mut out: Vec<(usize, ActivationTrace)> = Vec::new();
    for (name, tensor) in decode_tensors(&bytes)? {
        let (id, part) = name.split_once('/').ok_or_else(|| bad(&name))?;
        let id: usize = id.parse().map_err(|_| bad(&name))?;
        if out.last().is_none_or(|(last, _)| *last != id) {
            out.push((
                id,
                ActivationTrace {
                    mixed: Vec::new(),
                    logits: Tensor::scalar(0.0).expect("finite"),
                    predicted: 0,
                },
            ));
        }
        let trace = &mut out.last_mut().expect("pushed").1;
        if part == "logits" {
            trace.predicted = tensor.argmax();
            trace.logits = tensor;
        } else if part == format!("mixed{}", trace.mixed.len()) {
            trace.mixed.push(tensor);
        } else {
            return Err(bad(&name));
        }
    }
    Ok(out)
}

/// A run directory on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Wraps an existing run directory; it must contain a manifest.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let run = Self { root: root.into() };
        if !run.manifest_path().is_file() {
            return Err(StoreError::Layout(format!(
                "{} is not a run directory (no manifest.json)",
                run.root.display()
            )));
        }
        Ok(run)
    }

    /// A run directory that may not exist yet.
    pub fn at(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn weights_path(&self) -> PathBuf {
        self.root.join("weights.pfwt")
    }

    pub fn attacked_dir(&self, epsilon: Epsilon) -> PathBuf {
        self.root.join("attacked").join(format!("eps_{epsilon}"))
    }

    pub fn traces_dir(&self) -> PathBuf {
        self.root.join("traces")
    }

    pub fn graph_path(&self) -> PathBuf {
        self.root.join("graph.json")
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn assets_dir(&self) -> PathBuf {
        self.root.join("assets")
    }

    pub fn read_manifest(&self) -> Result<RunManifest> {
        read_json(&self.manifest_path())
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<()> {
        write_json(&self.manifest_path(), manifest)
    }

    /// Loads the run's model after checking its hash against the manifest.
    pub fn load_model(&self, manifest: &RunManifest) -> Result<MiniInception> {
        let path = self.weights_path();
        let actual = sha256_file(&path)?;
        if actual != manifest.weights_sha256 {
            return Err(StoreError::HashMismatch {
                expected: manifest.weights_sha256.clone(),
                actual,
            });
        }
        Ok(load_weights(&path)?)
    }

    pub fn read_attacked(&self, epsilon: Epsilon) -> Result<Vec<AttackResult>> {
        read_attacked_set(&self.attacked_dir(epsilon))
    }
}
