//! The graph document exchanged with the viewer.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{to_json_bytes, Result, RunManifest, StoreError};
use crate::attack::{eps_map, Epsilon};
use crate::explain::CropRect;
use crate::pathway::{Baseline, Context, NeuronId, PathwayEdge, PathwayGraph, PathwayNode, PathwayOptions, SetValues};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopK {
    pub benign: usize,
    pub attacked: usize,
}

/// A dataset crop shown for a neuron, with the PNG path relative to the document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchAsset {
    pub image_id: usize,
    pub row: usize,
    pub col: usize,
    pub rect: CropRect,
    pub activation: f64,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NodeAssets {
    pub patches: Vec<PatchAsset>,
    pub feature_vis: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDoc {
    pub layer: String,
    pub channel: usize,
    /// Kept as text so an unknown value can be reported with its node.
    pub context: String,
    pub importance: SetValues,
    #[serde(with = "eps_map")]
    pub excitation: BTreeMap<Epsilon, f64>,
    pub member_of: Vec<Epsilon>,
    pub patches: Vec<PatchAsset>,
    pub feature_vis: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeDoc {
    pub src: NeuronId,
    pub dst: NeuronId,
    pub influence: SetValues,
}

/// Serialized form of one (original, target) pair's graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDocument {
    pub schema_version: u32,
    pub manifest: RunManifest,
    pub layers: Vec<String>,
    pub layer_widths: Vec<usize>,
    pub epsilons: Vec<Epsilon>,
    pub top_k: TopK,
    pub baseline: Baseline,
    pub nodes: Vec<NodeDoc>,
    pub edges: Vec<EdgeDoc>,
}

fn context_name(c: Context) -> &'static str {
    match c {
        Context::Original => "original",
        Context::Target => "target",
        Context::Both => "both",
        Context::Attacked => "attacked",
    }
}

fn parse_context(s: &str) -> Option<Context> {
    [Context::Original, Context::Target, Context::Both, Context::Attacked]
        .into_iter()
        .find(|&c| context_name(c) == s)
}

impl GraphDocument {
    pub fn new(graph: &PathwayGraph, assets: &BTreeMap<NeuronId, NodeAssets>, manifest: &RunManifest) -> Result<Self> {
        graph.validate()?;
        if let Some(id) = assets.keys().find(|id| graph.node(**id).is_none()) {
            return Err(StoreError::OrphanAssets(*id));
        }
        let nodes = graph
            .nodes
            .iter()
            .map(|n| {
                let a = assets.get(&n.id).cloned().unwrap_or_default();
                NodeDoc {
                    layer: n.id.layer_name().to_string(),
                    channel: n.id.channel,
                    context: context_name(n.context).to_string(),
                    importance: n.importance.clone(),
                    excitation: n.excitation.clone(),
                    member_of: n.member_of.iter().copied().collect(),
                    patches: a.patches,
                    feature_vis: a.feature_vis,
                }
            })
            .collect();
        let edges = graph
            .edges
            .iter()
            .map(|e| EdgeDoc {
                src: e.source,
                dst: e.dest,
                influence: e.influence.clone(),
            })
            .collect();
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            manifest: manifest.clone(),
            layers: graph.layers.clone(),
            layer_widths: graph.layer_widths.clone(),
            epsilons: graph.epsilons.clone(),
            top_k: TopK {
                benign: graph.options.benign_k,
                attacked: graph.options.attacked_k,
            },
            baseline: graph.options.baseline,
            nodes,
            edges,
        })
    }

    /// Rebuilds and validates the graph, returning it with the per-node assets.
    pub fn into_graph(self) -> Result<(PathwayGraph, BTreeMap<NeuronId, NodeAssets>, RunManifest)> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(StoreError::SchemaVersion {
                found: self.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        let mut assets = BTreeMap::new();
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for n in self.nodes {
            let label = format!("{}:{}", n.layer, n.channel);
            let layer = NeuronId::layer_index(&n.layer).ok_or_else(|| {
                StoreError::Layout(format!("node {label}: unknown layer {:?}", n.layer))
            })?;
            let context = parse_context(&n.context).ok_or_else(|| StoreError::UnknownContext {
                node: label.clone(),
                value: n.context.clone(),
            })?;
            let id = NeuronId::new(layer, n.channel);
            let member_of: BTreeSet<Epsilon> = n.member_of.iter().copied().collect();
            if member_of.len() != n.member_of.len() {
                return Err(StoreError::Layout(format!("node {label}: repeated strength in member_of")));
            }
            if !n.patches.is_empty() || n.feature_vis.is_some() {
                assets.insert(
                    id,
                    NodeAssets {
                        patches: n.patches,
                        feature_vis: n.feature_vis,
                    },
                );
            }
            nodes.push(PathwayNode {
                id,
                context,
                importance: n.importance,
                excitation: n.excitation,
                member_of,
            });
        }
        let edges = self
            .edges
            .into_iter()
            .map(|e| PathwayEdge {
                source: e.src,
                dest: e.dst,
                influence: e.influence,
            })
            .collect();
        let graph = PathwayGraph {
            layers: self.layers,
            layer_widths: self.layer_widths,
            epsilons: self.epsilons,
            options: PathwayOptions {
                benign_k: self.top_k.benign,
                attacked_k: self.top_k.attacked,
                baseline: self.baseline,
            },
            nodes,
            edges,
        };
        graph.validate()?;
        Ok((graph, assets, self.manifest))
    }
}

/// Serializes a validated graph with its assets and manifest.
pub fn export_graph_json(
    graph: &PathwayGraph,
    assets: &BTreeMap<NeuronId, NodeAssets>,
    manifest: &RunManifest,
) -> Result<Vec<u8>> {
    to_json_bytes(&GraphDocument::new(graph, assets, manifest)?)
}

pub fn import_graph_json(bytes: &[u8]) -> Result<(PathwayGraph, BTreeMap<NeuronId, NodeAssets>, RunManifest)> {
    let doc: GraphDocument = serde_json::from_slice(bytes)?;
    doc.into_graph()
}
