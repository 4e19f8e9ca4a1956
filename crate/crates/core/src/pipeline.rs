//! The staged reference pipeline: train, attack, extract, explain, export.
//!
//! Every stage reads and writes files in a run directory, so stages can be
//! run separately from the command line or back to back from tests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::info;

use crate::attack::{sweep_all, AttackConfig, AttackError, Epsilon};
use crate::explain::{crop, feature_visualization, top_activating_patches, write_png, ExplainError, FeatureVisConfig};
use crate::model::{
    generate_dataset, save_weights, train, ActivationTrace, ArchSpec, Dataset, MiniInception, ModelError, Split,
    TrainConfig, TrainReport,
};
use crate::pathway::{
    build_pathway_graph, count_red_neurons, neuron_importance, Baseline, NeuronId, PathwayError, PathwayGraph,
    PathwayOptions,
};
use crate::store::{
    self, export_graph_json, import_graph_json, load_traces, run_id, save_traces, sha256_file, write_attacked_set,
    AttackParams, DatasetInfo, NodeAssets, PatchAsset, RunDir, RunManifest, StoreError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Pathway(#[from] PathwayError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn invalid(msg: impl Into<String>) -> PipelineError {
    PipelineError::Invalid(msg.into())
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Store(store::io_err(path)(e))
}

/// Patch and feature-visualization settings of the explain stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainParams {
    pub patches_per_neuron: usize,
    pub feature_vis: FeatureVisConfig,
}

impl Default for ExplainParams {
    fn default() -> Self {
        Self {
            patches_per_neuron: 5,
            feature_vis: FeatureVisConfig::default(),
        }
    }
}

/// The seeded configuration every reproducibility check runs against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConfig {
    pub dataset: DatasetInfo,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub original: usize,
    pub target: usize,
    pub epsilons: Vec<Epsilon>,
    pub attack: AttackParams,
    pub pathway: PathwayOptions,
    pub explain: ExplainParams,
}

impl ReferenceConfig {
    pub fn frozen() -> Self {
        Self {
            dataset: DatasetInfo {
                seed: 7,
                num_classes: 4,
                per_class: 500,
            },
            model_seed: 1,
            train: TrainConfig {
                learning_rate: 0.01,
                momentum: 0.9,
                epochs: 15,
                batch_size: 32,
                seed: 3,
            },
            original: 2,
            target: 3,
            epsilons: Epsilon::range(0.05, 0.5, 0.05).expect("valid range"),
            attack: AttackParams {
                steps: 40,
                step_factor: 2.5,
                random_start: None,
                max_images: 100,
            },
            pathway: PathwayOptions::default(),
            explain: ExplainParams::default(),
        }
    }
}

pub fn dataset_for(info: &DatasetInfo) -> Result<Dataset> {
    if info.num_classes < 2 || info.per_class < 5 {
        return Err(invalid("the dataset needs at least 2 classes and 5 images per class"));
    }
    Ok(generate_dataset(info.seed, info.num_classes, info.per_class))
}

/// Written next to a weight file by the train stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingRecord {
    pub weights_sha256: String,
    pub dataset: DatasetInfo,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub report: TrainReport,
}

impl TrainingRecord {
    pub fn test_accuracy(&self) -> f64 {
        self.report.final_stats().test_accuracy.unwrap_or(0.0)
    }
}

pub fn record_path(weights: &Path) -> PathBuf {
    let mut name = weights.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    weights.with_file_name(name)
}

pub fn read_training_record(weights: &Path) -> Result<Option<TrainingRecord>> {
    let path = record_path(weights);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(store::read_json(&path)?))
}

/// Trains the reference architecture and writes `out` plus its record.
pub fn train_stage(dataset: &DatasetInfo, model_seed: u64, config: &TrainConfig, out: &Path) -> Result<TrainingRecord> {
    let data = dataset_for(dataset)?;
    let mut model = MiniInception::new(ArchSpec::reference(dataset.num_classes), model_seed)?;
    let report = train(&mut model, &data, config)?;
    let tmp = out.with_extension("partial");
    save_weights(&model, &tmp)?;
    fs::rename(&tmp, out).map_err(io(out))?;
    let record = TrainingRecord {
        weights_sha256: sha256_file(out)?,
        dataset: dataset.clone(),
        model_seed,
        train: config.clone(),
        report,
    };
    store::write_json(&record_path(out), &record)?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackRequest {
    pub weights: PathBuf,
    pub dataset: DatasetInfo,
    pub original: usize,
    pub target: usize,
    pub epsilons: Vec<Epsilon>,
    pub attack: AttackParams,
    /// Seconds since the Unix epoch recorded in the manifest.
    pub created_at: u64,
}

/// Test-split images of `class` the model already classifies correctly, by id.
pub fn attack_candidates(model: &MiniInception, data: &Dataset, class: usize, limit: usize) -> Result<Vec<usize>> {
    let ids = data.class_indices(class, Split::Test);
    let keep = ids
        .par_iter()
        .map(|&i| Ok(model.predict(&data.images[i])? == class))
        .collect::<Result<Vec<bool>>>()?;
    Ok(ids.into_iter().zip(keep).filter(|(_, k)| *k).map(|(i, _)| i).take(limit).collect())
}

/// Runs the strength sweep and writes a new run directory under `out_root`.
///
/// The run is assembled in a hidden staging directory and renamed into place,
/// so a failure leaves nothing behind.
pub fn attack_stage(req: &AttackRequest, out_root: &Path) -> Result<RunDir> {
    let k = req.dataset.num_classes;
    if req.original >= k || req.target >= k {
        return Err(invalid(format!("classes must be below {k}")));
    }
    if req.original == req.target {
        return Err(invalid("original and target classes must differ"));
    }
    if req.epsilons.is_empty() {
        return Err(invalid("no attack strengths given"));
    }
    let id = run_id(req.original, req.target);
    let final_dir = out_root.join(&id);
    if final_dir.exists() {
        return Err(invalid(format!("{} already exists; remove it to rerun", final_dir.display())));
    }
    let staging = out_root.join(format!(".{id}.partial"));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io(&staging))?;
    }
    let fresh_root = !out_root.exists();
    fs::create_dir_all(&staging).map_err(io(&staging))?;
    let result = populate_run(req, &RunDir::at(&staging))
        .and_then(|()| fs::rename(&staging, &final_dir).map_err(io(&final_dir)));
    match result {
        Ok(()) => Ok(RunDir::at(final_dir)),
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            if fresh_root {
                let _ = fs::remove_dir(out_root);
            }
            Err(e)
        }
    }
}

fn populate_run(req: &AttackRequest, run: &RunDir) -> Result<()> {
    let weights = run.weights_path();
    fs::copy(&req.weights, &weights).map_err(io(&req.weights))?;
    let model = crate::model::load_weights(&weights)?;
    if model.num_classes() != req.dataset.num_classes {
        return Err(invalid(format!(
            "weights have {} classes but the dataset has {}",
            model.num_classes(),
            req.dataset.num_classes
        )));
    }
    let data = dataset_for(&req.dataset)?;
    let ids = attack_candidates(&model, &data, req.original, req.attack.max_images)?;
    if ids.is_empty() {
        return Err(invalid(format!("no correctly classified test images of class {}", req.original)));
    }
    let config = AttackConfig {
        epsilons: req.epsilons.clone(),
        steps: req.attack.steps,
        step_factor: req.attack.step_factor,
        random_start: req.attack.random_start,
        ..AttackConfig::new(req.target)
    };
    let images: Vec<(usize, &crate::Tensor)> = ids.iter().map(|&i| (i, &data.images[i])).collect();
    info!(images = ids.len(), strengths = req.epsilons.len(), "attacking");
    let results = sweep_all(&model, &images, req.original, &config)?;
    let mut success_counts = BTreeMap::new();
    for (&e, rs) in &results {
        write_attacked_set(&run.attacked_dir(e), e, rs)?;
        success_counts.insert(e, rs.iter().filter(|r| r.success).count());
    }
    run.write_manifest(&RunManifest {
        weights_sha256: sha256_file(&weights)?,
        dataset: req.dataset.clone(),
        original: req.original,
        target: req.target,
        epsilons: results.keys().copied().collect(),
        attack: req.attack.clone(),
        attacked_images: ids,
        success_counts,
        created_at: req.created_at,
    })?;
    Ok(())
}

/// Everything a later stage needs from a finished attack stage.
pub struct LoadedRun {
    pub run: RunDir,
    pub manifest: RunManifest,
    pub model: MiniInception,
    pub data: Dataset,
}

pub fn load_run(root: &Path) -> Result<LoadedRun> {
    let run = RunDir::open(root)?;
    let manifest = run.read_manifest()?;
    let model = run.load_model(&manifest)?;
    let data = dataset_for(&manifest.dataset)?;
    Ok(LoadedRun {
        run,
        manifest,
        model,
        data,
    })
}

fn trace_images(model: &MiniInception, images: &[(usize, &crate::Tensor)]) -> Result<Vec<(usize, ActivationTrace)>> {
    images
        .par_iter()
        .map(|&(id, img)| Ok((id, model.forward_with_trace(img)?)))
        .collect()
}

fn cached_traces(path: &Path, compute: impl FnOnce() -> Result<Vec<(usize, ActivationTrace)>>) -> Result<Vec<ActivationTrace>> {
    let traces = if path.exists() {
        load_traces(path)?
    } else {
        let t = compute()?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io(dir))?;
        }
        save_traces(path, &t)?;
        t
    };
    Ok(traces.into_iter().map(|(_, t)| t).collect())
}

/// Activation traces of the three image sets, cached under `traces/`.
pub struct RunTraces {
    pub original: Vec<ActivationTrace>,
    pub target: Vec<ActivationTrace>,
    pub attacked: BTreeMap<Epsilon, Vec<ActivationTrace>>,
}

pub fn run_traces(loaded: &LoadedRun) -> Result<RunTraces> {
    let LoadedRun {
        run,
        manifest,
        model,
        data,
    } = loaded;
    let dir = run.traces_dir();
    let benign = |class: usize, name: &str| {
        cached_traces(&dir.join(name), || {
            let ids = data.class_indices(class, Split::Test);
            let images: Vec<_> = ids.iter().map(|&i| (i, &data.images[i])).collect();
            trace_images(model, &images)
        })
    };
    let original = benign(manifest.original, "original.pfwt")?;
    let target = benign(manifest.target, "target.pfwt")?;
    let mut attacked = BTreeMap::new();
    for &e in &manifest.epsilons {
        let traces = cached_traces(&dir.join(format!("attacked_eps_{e}.pfwt")), || {
            let results = run.read_attacked(e)?;
            let images: Vec<_> = results
                .iter()
                .filter(|r| r.success)
                .map(|r| (r.image_id, &r.adversarial))
                .collect();
            trace_images(model, &images)
        })?;
        attacked.insert(e, traces);
    }
    Ok(RunTraces {
        original,
        target,
        attacked,
    })
}

fn assets_index_path(run: &RunDir) -> PathBuf {
    run.assets_dir().join("index.json")
}

fn read_assets(run: &RunDir) -> Result<BTreeMap<NeuronId, NodeAssets>> {
    let path = assets_index_path(run);
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let list: Vec<(NeuronId, NodeAssets)> = store::read_json(&path)?;
    Ok(list.into_iter().collect())
}

/// Builds the pathway graph and writes `graph.json` (or `out`), keeping any
/// assets a previous explain stage produced for nodes still in the graph.
pub fn extract_stage(root: &Path, options: &PathwayOptions, out: Option<&Path>) -> Result<(PathwayGraph, Vec<u8>)> {
    let loaded = load_run(root)?;
    let traces = run_traces(&loaded)?;
    let graph = build_pathway_graph(&loaded.model, &traces.original, &traces.target, &traces.attacked, options)?;
    let mut assets = read_assets(&loaded.run)?;
    assets.retain(|id, _| graph.node(*id).is_some());
    let bytes = export_graph_json(&graph, &assets, &loaded.manifest)?;
    let dest = out.map_or_else(|| loaded.run.graph_path(), Path::to_path_buf);
    store::write_atomic(&dest, &bytes)?;
    Ok((graph, bytes))
}

/// Feature-visualization outcome for one node, against the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVisCheck {
    pub neuron: NeuronId,
    pub initial_objective: f64,
    pub final_objective: f64,
    /// 95th percentile over dataset images of the same channel-mean objective.
    pub dataset_p95: f64,
}

fn channel_mean(trace: &ActivationTrace, id: NeuronId) -> f64 {
    let map = &trace.mixed[id.layer];
    let c = map.shape()[2];
    let (sum, n) = map
        .data()
        .chunks_exact(c)
        .fold((0.0f64, 0usize), |(s, n), px| (s + f64::from(px[id.channel]), n + 1));
    sum / n as f64
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// Renders dataset patches and a feature visualization for every graph node,
/// then rewrites `graph.json` with the asset paths.
pub fn explain_stage(root: &Path, params: &ExplainParams) -> Result<Vec<FeatureVisCheck>> {
    let loaded = load_run(root)?;
    let bytes = fs::read(loaded.run.graph_path()).map_err(io(&loaded.run.graph_path()))?;
    let (graph, _, manifest) = import_graph_json(&bytes)?;
    let images: Vec<_> = loaded.data.images.iter().enumerate().collect();
    let traces = trace_images(&loaded.model, &images)?;
    let refs: Vec<(usize, &ActivationTrace)> = traces.iter().map(|(i, t)| (*i, t)).collect();

    let staging = loaded.run.root().join("assets.partial");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io(&staging))?;
    }
    let spec = loaded.model.spec();
    let per_node = graph
        .nodes
        .par_iter()
        .map(|node| {
            let id = node.id;
            let dir_name = format!("{}_{}", id.layer_name(), id.channel);
            let dir = staging.join(&dir_name);
            fs::create_dir_all(&dir).map_err(io(&dir))?;
            let mut patches = Vec::new();
            for (i, p) in top_activating_patches(spec, &refs, id, params.patches_per_neuron)?
                .into_iter()
                .enumerate()
            {
                let name = format!("patch_{i}.png");
                write_png(&crop(&loaded.data.images[p.image_id], p.rect)?, &dir.join(&name))?;
                patches.push(PatchAsset {
                    image_id: p.image_id,
                    row: p.row,
                    col: p.col,
                    rect: p.rect,
                    activation: f64::from(p.activation),
                    path: format!("assets/{dir_name}/{name}"),
                });
            }
            let vis = feature_visualization(&loaded.model, id, &params.feature_vis)?;
            write_png(&vis.image, &dir.join("feature_vis.png"))?;
            let means: Vec<f64> = traces.iter().map(|(_, t)| channel_mean(t, id)).collect();
            let check = FeatureVisCheck {
                neuron: id,
                initial_objective: vis.initial_objective(),
                final_objective: vis.final_objective(),
                dataset_p95: percentile(&means, 95.0),
            };
            let assets = NodeAssets {
                patches,
                feature_vis: Some(format!("assets/{dir_name}/feature_vis.png")),
            };
            Ok((id, assets, check))
        })
        .collect::<Result<Vec<_>>>();
    let per_node = match per_node {
        Ok(v) => v,
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
    };
    let index: Vec<(NeuronId, NodeAssets)> = per_node.iter().map(|(id, a, _)| (*id, a.clone())).collect();
    let checks: Vec<FeatureVisCheck> = per_node.into_iter().map(|(_, _, c)| c).collect();
    store::write_json(&staging.join("index.json"), &index)?;
    store::write_json(&staging.join("feature_vis.json"), &checks)?;

    let assets_dir = loaded.run.assets_dir();
    if assets_dir.exists() {
        fs::remove_dir_all(&assets_dir).map_err(io(&assets_dir))?;
    }
    fs::rename(&staging, &assets_dir).map_err(io(&assets_dir))?;
    let assets: BTreeMap<_, _> = index.into_iter().collect();
    store::write_atomic(&loaded.run.graph_path(), &export_graph_json(&graph, &assets, &manifest)?)?;
    Ok(checks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthReport {
    pub attacked_images: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Red neurons among the 30% most important of each layer.
    pub red_top30: usize,
    pub red_all: usize,
}

/// Summary of one run written by the export stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: String,
    pub original: usize,
    pub target: usize,
    pub baseline: Baseline,
    #[serde(with = "crate::attack::eps_map")]
    pub strengths: BTreeMap<Epsilon, StrengthReport>,
    /// Quantiles (0, 25, 50, 75, 90, 99, 100) of per-image channel maxima on
    /// the original-class set, one row per mixed layer.
    pub maxima_quantiles: Vec<[f64; 7]>,
}

const QUANTILES: [f64; 7] = [0.0, 25.0, 50.0, 75.0, 90.0, 99.0, 100.0];

/// Checks that `graph.json` re-exports byte for byte, writes `report.json`,
/// and optionally copies the servable files to `dest/<run id>`.
pub fn export_stage(root: &Path, dest: Option<&Path>) -> Result<RunReport> {
    let run = RunDir::open(root)?;
    let graph_path = run.graph_path();
    let bytes = fs::read(&graph_path).map_err(io(&graph_path))?;
    let (graph, assets, manifest) = import_graph_json(&bytes)?;
    if export_graph_json(&graph, &assets, &manifest)? != bytes {
        return Err(invalid(format!("{} does not re-export identically", graph_path.display())));
    }
    if manifest != run.read_manifest()? {
        return Err(invalid("graph.json was built from a different manifest"));
    }
    let original = load_traces(&run.traces_dir().join("original.pfwt"))?;
    let original: Vec<_> = original.into_iter().map(|(_, t)| t).collect();
    let importance = neuron_importance(&original)?;
    let maxima_quantiles = importance
        .layers
        .iter()
        .map(|layer| {
            let all: Vec<f64> = layer.iter().flat_map(|s| s.maxima.iter().map(|&m| f64::from(m))).collect();
            QUANTILES.map(|q| percentile(&all, q))
        })
        .collect();
    let n = manifest.attacked_images.len();
    let mut strengths = BTreeMap::new();
    for (&e, &successes) in &manifest.success_counts {
        strengths.insert(
            e,
            StrengthReport {
                attacked_images: n,
                successes,
                success_rate: successes as f64 / n as f64,
                red_top30: count_red_neurons(&graph, e, 30.0)?,
                red_all: count_red_neurons(&graph, e, 100.0)?,
            },
        );
    }
    let report = RunReport {
        run: run_id(manifest.original, manifest.target),
        original: manifest.original,
        target: manifest.target,
        baseline: graph.options.baseline,
        strengths,
        maxima_quantiles,
    };
    store::write_json(&run.report_path(), &report)?;
    if let Some(dest) = dest {
        publish(&run, &dest.join(&report.run))?;
    }
    Ok(report)
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to).map_err(io(to))?;
    let mut entries = fs::read_dir(from)
        .map_err(io(from))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(io(from))?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let src = entry.path();
        let dst = to.join(entry.file_name());
        if src.is_dir() {
            copy_dir(&src, &dst)?;
        } else {
            fs::copy(&src, &dst).map_err(io(&src))?;
        }
    }
    Ok(())
}

fn publish(run: &RunDir, dest: &Path) -> Result<()> {
    let name = dest.file_name().and_then(|n| n.to_str()).unwrap_or("run");
    let parent = dest.parent().unwrap_or(Path::new("."));
    let staging = parent.join(format!(".{name}.partial"));
    let retired = parent.join(format!(".{name}.old"));
    for stale in [&staging, &retired] {
        if stale.exists() {
            fs::remove_dir_all(stale).map_err(io(stale))?;
        }
    }
    let fill = || -> Result<()> {
        fs::create_dir_all(&staging).map_err(io(&staging))?;
        for file in ["manifest.json", "graph.json", "report.json"] {
            let src = run.root().join(file);
            fs::copy(&src, staging.join(file)).map_err(io(&src))?;
        }
        if run.assets_dir().exists() {
            copy_dir(&run.assets_dir(), &staging.join("assets"))?;
        }
        Ok(())
    };
    if let Err(e) = fill() {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    if dest.exists() {
        fs::rename(dest, &retired).map_err(io(dest))?;
    }
    fs::rename(&staging, dest).map_err(io(dest))?;
    if retired.exists() {
        fs::remove_dir_all(&retired).map_err(io(&retired))?;
    }
    Ok(())
}
